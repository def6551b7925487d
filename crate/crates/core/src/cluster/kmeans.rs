use crate::{Error, Result};

pub const MAX_LLOYD_ITERATIONS: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after each assignment step, starting with the initial one.
    pub inertia: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeans {
    pub fn final_inertia(&self) -> f64 {
        *self.inertia.last().expect("at least one assignment step")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest id.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn means(points: &[Vec<f64>], assignment: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let d = points[0].len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    (sums, counts)
}

/// Moves the point farthest from its own centroid into each empty cluster.
fn repair_empty(points: &[Vec<f64>], assignment: &mut [usize], k: usize) -> Vec<Vec<f64>> {
    loop {
        let (mut centroids, counts) = means(points, assignment, k);
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return centroids;
        };
        let mut far = (usize::MAX, -1.0);
        for (i, p) in points.iter().enumerate() {
            if counts[assignment[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[assignment[i]]);
            if d > far.1 {
                far = (i, d);
            }
        }
        if far.0 == usize::MAX {
            // fewer distinct donors than clusters; leave the rest empty
            return centroids;
        }
        assignment[far.0] = empty;
        centroids[empty] = points[far.0].clone();
    }
}

/// Farthest-first seeding starting from the point nearest the overall mean.
fn maximin(points: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let (mean, _) = means(points, &vec![0; points.len()], 1);
    let first = nearest_point(points, &mean[0]);
    let mut chosen = vec![points[first].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &chosen[0])).collect();
    while chosen.len() < k {
        let mut far = (0, -1.0);
        for (i, &d) in dist.iter().enumerate() {
            if d > far.1 {
                far = (i, d);
            }
        }
        let c = points[far.0].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        chosen.push(c);
    }
    chosen
}

fn nearest_point(points: &[Vec<f64>], target: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = sq_dist(p, target);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Lloyd iterations until the assignment is fixed or
/// [`MAX_LLOYD_ITERATIONS`] is reached. With `init` the centroids start as
/// the means of that assignment; otherwise farthest-first seeding is used.
pub fn kmeans(points: &[Vec<f64>], k: usize, init: Option<&[usize]>) -> Result<KMeans> {
    let m = points.len();
    if k == 0 || k > m {
        return Err(Error::InvalidArgument(format!("{k} clusters for {m} points")));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::DimensionMismatch("points differ in dimension".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let mut centroids = match init {
        Some(a) => {
            if a.len() != m || a.iter().any(|&c| c >= k) {
                return Err(Error::InvalidArgument("initial assignment does not fit".into()));
            }
            let mut a = a.to_vec();
            repair_empty(points, &mut a, k)
        }
        None => maximin(points, k),
    };
    let mut assignment: Vec<usize> = init.map(<[usize]>::to_vec).unwrap_or_else(|| vec![usize::MAX; m]);
    let mut inertia = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_LLOYD_ITERATIONS {
        let mut changed = false;
        let mut total = 0.0;
        for (p, a) in points.iter().zip(assignment.iter_mut()) {
            let (c, dist) = nearest(p, &centroids);
            total += dist;
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        inertia.push(total);
        if !changed {
            converged = true;
            break;
        }
        iterations += 1;
        centroids = repair_empty(points, &mut assignment, k);
    }
    Ok(KMeans {
        assignment,
        centroids,
        inertia,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_point_per_cluster() {
        let pts = vec![vec![0.0, 1.0], vec![3.0, -1.0], vec![2.0, 2.0]];
        let km = kmeans(&pts, 3, None).unwrap();
        assert_eq!(km.final_inertia(), 0.0);
        let mut a = km.assignment.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2]);
    }

    #[test]
    fn single_cluster_is_mean() {
        let pts = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![-1.0, 1.0], vec![0.5, 0.0]];
        let km = kmeans(&pts, 1, None).unwrap();
        assert!((km.centroids[0][0] - 0.875).abs() < 1e-12);
        assert!((km.centroids[0][1] - 2.25).abs() < 1e-12);
    }

    #[test]
    fn warm_start_from_fixed_point_is_stable() {
        let pts: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()]).collect();
        let km = kmeans(&pts, 4, None).unwrap();
        assert!(km.converged);
        let again = kmeans(&pts, 4, Some(&km.assignment)).unwrap();
        assert_eq!(again.assignment, km.assignment);
        assert_eq!(again.iterations, 0);
    }

    #[test]
    fn empty_initial_cluster_is_reseeded() {
        let pts = vec![vec![0.0], vec![0.1], vec![5.0], vec![5.2]];
        let km = kmeans(&pts, 2, Some(&[0, 0, 0, 0])).unwrap();
        assert_ne!(km.assignment[0], km.assignment[2]);
        assert_eq!(km.assignment[0], km.assignment[1]);
        assert_eq!(km.assignment[2], km.assignment[3]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(kmeans(&[vec![1.0]], 2, None).is_err());
        assert!(kmeans(&[vec![1.0], vec![1.0, 2.0]], 1, None).is_err());
        assert!(kmeans(&[vec![1.0], vec![2.0]], 2, Some(&[0, 2])).is_err());
    }
}
