//! Label-defined clusters and the proximity test for boundary samples.
//!
//! A sample `y` is assigned to the class holding its nearest data point; its
//! boundary radius `R` is that nearest distance. `y` satisfies the proximity
//! inequality when `R` is strictly below the class's inter-class floor, the
//! smallest distance between a sample of that class and a sample of any other
//! class. The margin is `|R - floor|`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::p_dist;

/// Labelled points. Class indices are dense and zero-based, `0..n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    dim: usize,
    points: Vec<Vec<f64>>,
    labels: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl ClusteredDataset {
    pub fn new(points: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::input(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        let dim = points.first().map(|p| p.len()).unwrap_or(0);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::input("points have inconsistent dimensions"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::input("dataset contains non-finite values"));
        }
        let n_classes = labels.iter().max().map(|m| m + 1).unwrap_or(0);
        let mut members = vec![Vec::new(); n_classes];
        for (i, &l) in labels.iter().enumerate() {
            members[l].push(i);
        }
        if let Some(k) = members.iter().position(|m| m.is_empty()) {
            return Err(Error::input(format!("class indices are not dense: class {k} is empty")));
        }
        Ok(ClusteredDataset {
            dim,
            points,
            labels,
            members,
        })
    }

    /// Builds a dataset from per-class point groups; group `i` becomes class `i`.
    pub fn from_groups(groups: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (i, g) in groups.into_iter().enumerate() {
            labels.extend(std::iter::repeat_n(i, g.len()));
            points.extend(g);
        }
        Self::new(points, labels)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.members.len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Points of class `i` in dataset order.
    pub fn class_points(&self, i: usize) -> impl Iterator<Item = &[f64]> + '_ {
        self.members[i].iter().map(move |&j| self.points[j].as_slice())
    }

    pub fn class_len(&self, i: usize) -> usize {
        self.members[i].len()
    }

    fn check_class(&self, i: usize) -> Result<()> {
        if i >= self.n_classes() {
            return Err(Error::input(format!(
                "class {i} does not exist ({} classes)",
                self.n_classes()
            )));
        }
        Ok(())
    }

    fn check_query(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.dim {
            return Err(Error::input(format!(
                "query has dimension {}, dataset {}",
                y.len(),
                self.dim
            )));
        }
        Ok(())
    }
}

/// How the inter-class floor pairs samples of two classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloorPairing {
    /// Minimum over every cross-class pair `(j, j')`.
    #[default]
    AllPairs,
    /// Only pairs sharing a within-class position `j`, over the common prefix
    /// `j < min(L_i, L_k)`. Depends on sample order.
    SharedIndex,
}

/// `min_j ||y - x_{i,j}||_p`.
pub fn point_to_class_dist(y: &[f64], ds: &ClusteredDataset, class: usize, p: f64) -> Result<f64> {
    ds.check_class(class)?;
    ds.check_query(y)?;
    if ds.class_len(class) == 0 {
        return Err(Error::input(format!("class {class} is empty")));
    }
    Ok(ds
        .class_points(class)
        .map(|x| p_dist(y, x, p))
        .fold(f64::INFINITY, f64::min))
}

/// Class with the nearest member; ties go to the lowest class index.
pub fn assign_cluster(y: &[f64], ds: &ClusteredDataset, p: f64) -> Result<usize> {
    Ok(nearest_class(y, ds, p)?.0)
}

fn nearest_class(y: &[f64], ds: &ClusteredDataset, p: f64) -> Result<(usize, f64)> {
    if ds.n_classes() == 0 {
        return Err(Error::input("dataset has no classes"));
    }
    let mut best = (0, f64::INFINITY);
    for i in 0..ds.n_classes() {
        let d = point_to_class_dist(y, ds, i, p)?;
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best)
}

/// `R(y, k) = min_j ||y - x_{k,j}||_p`.
pub fn boundary_radius(y: &[f64], ds: &ClusteredDataset, class: usize, p: f64) -> Result<f64> {
    point_to_class_dist(y, ds, class, p)
}

/// Smallest distance between a sample of `class` and a sample of any other class.
pub fn inter_class_floor(ds: &ClusteredDataset, class: usize, p: f64, pairing: FloorPairing) -> Result<f64> {
    if ds.n_classes() < 2 {
        return Err(Error::input("the inter-class floor needs at least two classes"));
    }
    ds.check_class(class)?;
    let mut best = f64::INFINITY;
    for other in (0..ds.n_classes()).filter(|&i| i != class) {
        match pairing {
            FloorPairing::AllPairs => {
                for a in ds.class_points(other) {
                    for b in ds.class_points(class) {
                        best = best.min(p_dist(a, b, p));
                    }
                }
            }
            FloorPairing::SharedIndex => {
                for (a, b) in ds.class_points(other).zip(ds.class_points(class)) {
                    best = best.min(p_dist(a, b, p));
                }
            }
        }
    }
    Ok(best)
}

/// Outcome of the proximity test for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Proximity {
    pub class: usize,
    pub radius: f64,
    pub floor: f64,
    pub satisfied: bool,
    pub margin: f64,
}

/// Assigns `y`, then compares its boundary radius with the class floor.
pub fn check_proximity(y: &[f64], ds: &ClusteredDataset, p: f64, pairing: FloorPairing) -> Result<Proximity> {
    let floor_of = |k| inter_class_floor(ds, k, p, pairing);
    let (class, radius) = nearest_class(y, ds, p)?;
    let floor = floor_of(class)?;
    Ok(Proximity {
        class,
        radius,
        floor,
        satisfied: radius < floor,
        margin: (radius - floor).abs(),
    })
}

/// Floors of every class, computed once for batch checks.
pub fn class_floors(ds: &ClusteredDataset, p: f64, pairing: FloorPairing) -> Result<Vec<f64>> {
    (0..ds.n_classes())
        .map(|k| inter_class_floor(ds, k, p, pairing))
        .collect()
}

/// [`check_proximity`] for many samples, reusing precomputed floors.
pub fn check_proximity_batch(
    samples: &[Vec<f64>],
    ds: &ClusteredDataset,
    p: f64,
    pairing: FloorPairing,
) -> Result<Vec<Proximity>> {
    use rayon::prelude::*;
    let floors = class_floors(ds, p, pairing)?;
    samples
        .par_iter()
        .map(|y| {
            let (class, radius) = nearest_class(y, ds, p)?;
            let floor = floors[class];
            Ok(Proximity {
                class,
                radius,
                floor,
                satisfied: radius < floor,
                margin: (radius - floor).abs(),
            })
        })
        .collect()
}

/// Aggregate of a batch of proximity checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProximitySummary {
    pub n: usize,
    pub satisfied_fraction: f64,
    pub mean_margin: f64,
    pub min_margin: f64,
    pub median_margin: f64,
}

pub fn summarize(checks: &[Proximity]) -> Option<ProximitySummary> {
    if checks.is_empty() {
        return None;
    }
    let n = checks.len();
    let mut margins: Vec<f64> = checks.iter().map(|c| c.margin).collect();
    margins.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        margins[n / 2]
    } else {
        0.5 * (margins[n / 2 - 1] + margins[n / 2])
    };
    Some(ProximitySummary {
        n,
        satisfied_fraction: checks.iter().filter(|c| c.satisfied).count() as f64 / n as f64,
        mean_margin: margins.iter().sum::<f64>() / n as f64,
        min_margin: margins[0],
        median_margin: median,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_singletons() -> ClusteredDataset {
        ClusteredDataset::from_groups(vec![vec![vec![0.0, 0.0]], vec![vec![3.0, 4.0]]]).unwrap()
    }

    fn random_ds(rng: &mut ChaCha8Rng, k: usize, l: usize) -> ClusteredDataset {
        let groups = (0..k)
            .map(|i| {
                (0..l)
                    .map(|_| vec![rng.random::<f64>() * 4.0 + 5.0 * i as f64, rng.random::<f64>() * 4.0])
                    .collect()
            })
            .collect();
        ClusteredDataset::from_groups(groups).unwrap()
    }

    #[test]
    fn nearest_member_distance() {
        let ds = ClusteredDataset::from_groups(vec![vec![vec![0.0, 0.0], vec![3.0, 4.0]]]).unwrap();
        assert_eq!(point_to_class_dist(&[0.0, 1.0], &ds, 0, 2.0).unwrap(), 1.0);
        assert_eq!(point_to_class_dist(&[3.0, 4.0], &ds, 0, 2.0).unwrap(), 0.0);
        assert!(point_to_class_dist(&[3.0, 4.0], &ds, 1, 2.0).is_err());
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let ds =
            ClusteredDataset::from_groups(vec![vec![vec![-1.0, 0.0]], vec![vec![0.0, 10.0]], vec![vec![1.0, 0.0]]])
                .unwrap();
        assert_eq!(assign_cluster(&[0.0, 0.0], &ds, 2.0).unwrap(), 0);
        assert_eq!(assign_cluster(&[0.0, 9.0], &ds, 2.0).unwrap(), 1);
    }

    #[test]
    fn brute_force_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = random_ds(&mut rng, 4, 25);
        for _ in 0..500 {
            let y = vec![rng.random::<f64>() * 24.0 - 2.0, rng.random::<f64>() * 6.0 - 1.0];
            let mut best = (usize::MAX, f64::INFINITY);
            for (x, &l) in ds.points().iter().zip(ds.labels()) {
                let d = ((y[0] - x[0]).powi(2) + (y[1] - x[1]).powi(2)).sqrt();
                if d < best.1 || (d == best.1 && l < best.0) {
                    best = (l, d);
                }
            }
            let k = assign_cluster(&y, &ds, 2.0).unwrap();
            assert_eq!(k, best.0);
            assert_eq!(boundary_radius(&y, &ds, k, 2.0).unwrap(), best.1);
            for i in 0..4 {
                assert!(best.1 <= point_to_class_dist(&y, &ds, i, 2.0).unwrap());
            }
        }
    }

    #[test]
    fn floor_examples() {
        let ds = two_singletons();
        assert_eq!(inter_class_floor(&ds, 0, 2.0, FloorPairing::AllPairs).unwrap(), 5.0);
        let dup = ClusteredDataset::from_groups(vec![
            vec![vec![1.0, 1.0], vec![2.0, 0.0]],
            vec![vec![1.0, 1.0], vec![2.0, 0.0]],
        ])
        .unwrap();
        assert_eq!(inter_class_floor(&dup, 1, 2.0, FloorPairing::AllPairs).unwrap(), 0.0);
        let one = ClusteredDataset::from_groups(vec![vec![vec![0.0, 0.0]]]).unwrap();
        assert!(inter_class_floor(&one, 0, 2.0, FloorPairing::AllPairs).is_err());
    }

    #[test]
    fn floor_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = random_ds(&mut rng, 3, 10);
        for k in 0..3 {
            let mut best = f64::INFINITY;
            for (a, &la) in ds.points().iter().zip(ds.labels()) {
                for (b, &lb) in ds.points().iter().zip(ds.labels()) {
                    if lb == k && la != k {
                        best = best.min(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
                    }
                }
            }
            assert_eq!(inter_class_floor(&ds, k, 2.0, FloorPairing::AllPairs).unwrap(), best);
            assert!(inter_class_floor(&ds, k, 2.0, FloorPairing::SharedIndex).unwrap() >= best);
        }
    }

    #[test]
    fn proximity_at_sample_and_on_floor() {
        let ds = two_singletons();
        let at = check_proximity(&[0.0, 0.0], &ds, 2.0, FloorPairing::AllPairs).unwrap();
        assert_eq!(
            (at.class, at.radius, at.floor, at.satisfied, at.margin),
            (0, 0.0, 5.0, true, 5.0)
        );
        // distance exactly 5 from class 0, farther from class 1
        let on = check_proximity(&[-3.0, -4.0], &ds, 2.0, FloorPairing::AllPairs).unwrap();
        assert_eq!(on.radius, 5.0);
        assert!(!on.satisfied);
        assert_eq!(on.margin, 0.0);
    }

    #[test]
    fn batch_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = random_ds(&mut rng, 3, 15);
        let ys: Vec<Vec<f64>> = (0..50)
            .map(|_| vec![rng.random::<f64>() * 16.0, rng.random::<f64>() * 5.0])
            .collect();
        let batch = check_proximity_batch(&ys, &ds, 2.0, FloorPairing::AllPairs).unwrap();
        for (y, b) in ys.iter().zip(&batch) {
            assert_eq!(*b, check_proximity(y, &ds, 2.0, FloorPairing::AllPairs).unwrap());
        }
        let frac = batch.iter().filter(|c| c.satisfied).count() as f64 / 50.0;
        assert_eq!(summarize(&batch).unwrap().satisfied_fraction, frac);
    }

    proptest! {
        #[test]
        fn radius_is_global_nearest(seed in 0u64..1000, yx in -5.0f64..20.0, yy in -5.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds = random_ds(&mut rng, 3, 6);
            let y = [yx, yy];
            let k = assign_cluster(&y, &ds, 2.0).unwrap();
            let global = ds.points().iter().map(|x| p_dist(&y, x, 2.0)).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(boundary_radius(&y, &ds, k, 2.0).unwrap(), global);
        }

        #[test]
        fn scaling_preserves_satisfaction(seed in 0u64..1000, c in 0.1f64..10.0, yx in -5.0f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds = random_ds(&mut rng, 3, 6);
            let y = [yx, 1.0];
            let scaled = ClusteredDataset::new(
                ds.points().iter().map(|x| x.iter().map(|v| v * c).collect()).collect(),
                ds.labels().to_vec(),
            ).unwrap();
            let ys = [yx * c, c];
            let a = check_proximity(&y, &ds, 2.0, FloorPairing::AllPairs).unwrap();
            let b = check_proximity(&ys, &scaled, 2.0, FloorPairing::AllPairs).unwrap();
            prop_assert_eq!(a.satisfied, b.satisfied);
            prop_assert!((b.radius - c * a.radius).abs() <= 1e-9 * (1.0 + b.radius));
            prop_assert!((b.floor - c * a.floor).abs() <= 1e-9 * (1.0 + b.floor));
        }

        #[test]
        fn permutation_invariance(seed in 0u64..1000, yx in -5.0f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds = random_ds(&mut rng, 3, 6);
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
            let perm = ClusteredDataset::new(
                idx.iter().map(|&i| ds.points()[i].clone()).collect(),
                idx.iter().map(|&i| ds.labels()[i]).collect(),
            ).unwrap();
            let y = [yx, 2.0];
            let k = assign_cluster(&y, &ds, 2.0).unwrap();
            prop_assert_eq!(k, assign_cluster(&y, &perm, 2.0).unwrap());
            prop_assert_eq!(boundary_radius(&y, &ds, k, 2.0).unwrap(), boundary_radius(&y, &perm, k, 2.0).unwrap());
            prop_assert_eq!(
                inter_class_floor(&ds, k, 2.0, FloorPairing::AllPairs).unwrap(),
                inter_class_floor(&perm, k, 2.0, FloorPairing::AllPairs).unwrap()
            );
        }
    }
}
