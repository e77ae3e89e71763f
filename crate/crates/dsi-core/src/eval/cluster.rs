//! Cluster agreement measures for synthetic-recovery checks: majority
//! purity, Hungarian-matched accuracy, and a silhouette score for 2-D
//! projections.

use std::collections::BTreeMap;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;

/// Majority purity: match every cluster to its majority label and count
/// the fraction of items whose cluster's majority label is their own.
pub fn purity(assignments: &[(usize, usize)]) -> f64 {
    if assignments.is_empty() {
        return 0.0;
    }
    let mut per_cluster: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for &(cluster, label) in assignments {
        *per_cluster.entry(cluster).or_default().entry(label).or_insert(0) += 1;
    }
    let majority_sum: usize = per_cluster
        .values()
        .map(|labels| labels.values().copied().max().unwrap_or(0))
        .sum();
    majority_sum as f64 / assignments.len() as f64
}

/// One-to-one cluster/label accuracy via maximum-weight bipartite matching
/// on the count matrix.
pub fn hungarian_accuracy(assignments: &[(usize, usize)]) -> f64 {
    if assignments.is_empty() {
        return 0.0;
    }
    let clusters: Vec<usize> = {
        let mut v: Vec<usize> = assignments.iter().map(|a| a.0).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let labels: Vec<usize> = {
        let mut v: Vec<usize> = assignments.iter().map(|a| a.1).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let cluster_pos: BTreeMap<usize, usize> =
        clusters.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let label_pos: BTreeMap<usize, usize> =
        labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    // kuhn_munkres needs rows <= columns; pad the short side with zeros.
    let side = clusters.len().max(labels.len());
    let mut counts = vec![vec![0i64; side]; side];
    for &(cluster, label) in assignments {
        counts[cluster_pos[&cluster]][label_pos[&label]] += 1;
    }
    let matrix = Matrix::from_rows(counts).expect("square count matrix");
    let (total, _) = kuhn_munkres(&matrix);
    total as f64 / assignments.len() as f64
}

/// Mean silhouette coefficient of labeled 2-D points.
pub fn silhouette_2d(points: &[(f64, f64)], labels: &[usize]) -> f64 {
    assert_eq!(points.len(), labels.len());
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let unique: Vec<usize> = {
        let mut v = labels.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    if unique.len() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for i in 0..n {
        let own = labels[i];
        let own_size = labels.iter().filter(|&&l| l == own).count();
        if own_size < 2 {
            continue;
        }
        let mut a = 0.0;
        let mut b = f64::INFINITY;
        for &other in &unique {
            let members: Vec<usize> = (0..n)
                .filter(|&j| labels[j] == other && j != i)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mean: f64 = members
                .iter()
                .map(|&j| dist(points[i], points[j]))
                .sum::<f64>()
                / members.len() as f64;
            if other == own {
                a = mean;
            } else {
                b = b.min(mean);
            }
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
            counted += 1;
        }
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}
