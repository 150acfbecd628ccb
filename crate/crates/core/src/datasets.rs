//! Synthetic 2-D benchmark data: the two-moons adaptation pair, Gaussian
//! mixtures for semi-supervised runs, and seeded batch iteration.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// 2-D points with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet2D {
    pub points: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet2D {
    pub fn new(points: Tensor, labels: Vec<usize>) -> Result<LabeledSet2D> {
        if points.shape().len() != 2 || points.shape()[1] != 2 {
            return Err(Error::contract(format!(
                "points must be [n×2], got {:?}",
                points.shape()
            )));
        }
        if points.shape()[0] != labels.len() {
            return Err(Error::contract("label count must match point count"));
        }
        Ok(LabeledSet2D { points, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// Rows of `points` selected by index.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * 2);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.push(self.points.get2(i, 0));
            data.push(self.points.get2(i, 1));
            labels.push(self.labels[i]);
        }
        (Tensor::raw(vec![indices.len(), 2], data), labels)
    }

    pub fn centroid(&self) -> (f64, f64) {
        let n = self.len() as f64;
        let (mut cx, mut cy) = (0.0, 0.0);
        for i in 0..self.len() {
            cx += self.points.get2(i, 0);
            cy += self.points.get2(i, 1);
        }
        (cx / n, cy / n)
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MoonsConfig {
    pub n_per_domain: usize,
    pub noise_std: f64,
    pub rotation_degrees: f64,
    pub seed: u64,
}

impl Default for MoonsConfig {
    fn default() -> Self {
        MoonsConfig {
            n_per_domain: 300,
            noise_std: 0.1,
            rotation_degrees: 30.0,
            seed: 0,
        }
    }
}

/// Two interleaving half-circles: class 0 at `(cos θ, sin θ)`, class 1 at
/// `(1 − cos θ, 0.5 − sin θ)` with θ on a uniform grid over `[0, π]`, plus
/// isotropic Gaussian noise of the given standard deviation.
pub fn make_two_moons(n: usize, noise_std: f64, rng: &mut Rng) -> Result<LabeledSet2D> {
    if n < 2 {
        return Err(Error::contract("two moons needs at least 2 points"));
    }
    let n0 = n.div_ceil(2);
    let n1 = n / 2;
    let arc = |m: usize, i: usize| -> f64 {
        if m == 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (m - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n0 {
        let theta = arc(n0, i);
        data.push(theta.cos() + noise_std * rng.normal());
        data.push(theta.sin() + noise_std * rng.normal());
        labels.push(0);
    }
    for i in 0..n1 {
        let theta = arc(n1, i);
        data.push(1.0 - theta.cos() + noise_std * rng.normal());
        data.push(0.5 - theta.sin() + noise_std * rng.normal());
        labels.push(1);
    }
    LabeledSet2D::new(Tensor::from_vec(vec![n, 2], data)?, labels)
}

/// Rotates every point about the set's own centroid; labels are unchanged.
/// Rotating about the centroid keeps the domains overlapping instead of
/// swinging the whole set around the raw origin.
pub fn rotate(set: &LabeledSet2D, degrees: f64) -> LabeledSet2D {
    let (cx, cy) = set.centroid();
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    let n = set.len();
    let mut data = Vec::with_capacity(n * 2);
    for i in 0..n {
        let x = set.points.get2(i, 0) - cx;
        let y = set.points.get2(i, 1) - cy;
        data.push(cx + cos * x - sin * y);
        data.push(cy + sin * x + cos * y);
    }
    LabeledSet2D {
        points: Tensor::raw(vec![n, 2], data),
        labels: set.labels.clone(),
    }
}

/// `K` Gaussian blobs with means equally spaced on a circle of radius
/// `separation`. Returns a small labeled subset (`n_labeled_per_class` per
/// class, grouped) plus `n_unlabeled` unlabeled draws from the same mixture.
pub fn make_gaussian_mixture(
    k: usize,
    n_labeled_per_class: usize,
    n_unlabeled: usize,
    separation: f64,
    noise_std: f64,
    rng: &mut Rng,
) -> Result<(LabeledSet2D, Tensor)> {
    if k < 2 {
        return Err(Error::contract("mixture needs at least 2 classes"));
    }
    if n_labeled_per_class == 0 || n_unlabeled == 0 {
        return Err(Error::contract("mixture sample counts must be positive"));
    }
    let mean = |class: usize| -> (f64, f64) {
        let angle = std::f64::consts::TAU * class as f64 / k as f64;
        (separation * angle.cos(), separation * angle.sin())
    };

    let n_labeled = k * n_labeled_per_class;
    let mut data = Vec::with_capacity(n_labeled * 2);
    let mut labels = Vec::with_capacity(n_labeled);
    for class in 0..k {
        let (mx, my) = mean(class);
        for _ in 0..n_labeled_per_class {
            data.push(mx + noise_std * rng.normal());
            data.push(my + noise_std * rng.normal());
            labels.push(class);
        }
    }
    let labeled = LabeledSet2D::new(Tensor::from_vec(vec![n_labeled, 2], data)?, labels)?;

    let mut unlabeled = Vec::with_capacity(n_unlabeled * 2);
    for _ in 0..n_unlabeled {
        let class = rng.index(k);
        let (mx, my) = mean(class);
        unlabeled.push(mx + noise_std * rng.normal());
        unlabeled.push(my + noise_std * rng.normal());
    }
    Ok((labeled, Tensor::from_vec(vec![n_unlabeled, 2], unlabeled)?))
}

/// Seeded epoch iterator over index batches. Each epoch is a fresh
/// permutation; a final short batch is dropped so batch statistics stay
/// stable.
#[derive(Clone, Debug)]
pub struct BatchIter {
    n: usize,
    batch_size: usize,
    rng: Rng,
    epochs_left: usize,
    order: Vec<usize>,
    cursor: usize,
}

/// `batch_size` must not exceed `n`; `epochs` bounds how many reshuffles the
/// iterator will perform.
pub fn batch_iter(n: usize, batch_size: usize, rng: Rng, epochs: usize) -> Result<BatchIter> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::contract(format!(
            "batch size {batch_size} invalid for {n} samples"
        )));
    }
    Ok(BatchIter {
        n,
        batch_size,
        rng,
        epochs_left: epochs,
        order: Vec::new(),
        cursor: 0,
    })
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.cursor + self.batch_size > self.order.len() {
            if self.epochs_left == 0 {
                return None;
            }
            self.epochs_left -= 1;
            self.order = (0..self.n).collect();
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        Some(batch)
    }
}

// ---------------------------------------------------------------------------
// CSV dump/load for external plotting
// ---------------------------------------------------------------------------

/// Writes `x,y,label,domain` rows for each named set.
pub fn write_csv(mut w: impl Write, sets: &[(&str, &LabeledSet2D)]) -> std::io::Result<()> {
    writeln!(w, "x,y,label,domain")?;
    for (domain, set) in sets {
        for i in 0..set.len() {
            writeln!(
                w,
                "{},{},{},{}",
                set.points.get2(i, 0),
                set.points.get2(i, 1),
                set.labels[i],
                domain
            )?;
        }
    }
    Ok(())
}

/// Reads rows written by [`write_csv`], grouped by domain column in first-seen
/// order.
pub fn read_csv(r: impl BufRead) -> Result<Vec<(String, LabeledSet2D)>> {
    let mut groups: Vec<(String, Vec<f64>, Vec<usize>)> = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if lineno == 0 {
            continue; // header
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::contract(format!("bad csv row: {line:?}")));
        }
        let x: f64 = fields[0]
            .parse()
            .map_err(|_| Error::contract(format!("bad x in {line:?}")))?;
        let y: f64 = fields[1]
            .parse()
            .map_err(|_| Error::contract(format!("bad y in {line:?}")))?;
        let label: usize = fields[2]
            .parse()
            .map_err(|_| Error::contract(format!("bad label in {line:?}")))?;
        let domain = fields[3].to_string();
        match groups.iter_mut().find(|(d, _, _)| *d == domain) {
            Some((_, data, labels)) => {
                data.push(x);
                data.push(y);
                labels.push(label);
            }
            None => groups.push((domain, vec![x, y], vec![label])),
        }
    }
    groups
        .into_iter()
        .map(|(domain, data, labels)| {
            let n = labels.len();
            Ok((
                domain,
                LabeledSet2D::new(Tensor::from_vec(vec![n, 2], data)?, labels)?,
            ))
        })
        .collect()
}

pub fn save_csv(path: impl AsRef<Path>, sets: &[(&str, &LabeledSet2D)]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(std::io::BufWriter::new(file), sets)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_zero_noise_on_parametric_arcs() {
        let mut rng = Rng::new(1);
        let set = make_two_moons(4, 0.0, &mut rng).unwrap();
        // n0 = n1 = 2: θ ∈ {0, π} per moon.
        let expect = [
            (1.0, 0.0),
            (-1.0, 0.0),
            (0.0, 0.5),
            (2.0, 0.5),
        ];
        for (i, &(ex, ey)) in expect.iter().enumerate() {
            assert!((set.points.get2(i, 0) - ex).abs() < 1e-12);
            assert!((set.points.get2(i, 1) - ey).abs() < 1e-12);
        }
        assert_eq!(set.labels, vec![0, 0, 1, 1]);
    }

    #[test]
    fn moons_class_counts_split_evenly() {
        let mut rng = Rng::new(2);
        let set = make_two_moons(300, 0.1, &mut rng).unwrap();
        let zeros = set.labels.iter().filter(|&&l| l == 0).count();
        assert_eq!(zeros, 150);
        assert_eq!(set.len() - zeros, 150);
    }

    #[test]
    fn moons_noise_displacement_matches_folded_normal() {
        // Mean distance from the noise-free arc position is E‖ε‖ = σ·√(π/2)
        // for isotropic 2-D Gaussian noise; Monte-Carlo agrees within 10%.
        let noise = 0.1;
        let clean = make_two_moons(300, 0.0, &mut Rng::new(5)).unwrap();
        let noisy = make_two_moons(300, noise, &mut Rng::new(5)).unwrap();
        let mut mean_dist = 0.0;
        let mut count = 0;
        for i in 0..noisy.len() {
            if noisy.labels[i] != 0 {
                continue;
            }
            let dx = noisy.points.get2(i, 0) - clean.points.get2(i, 0);
            let dy = noisy.points.get2(i, 1) - clean.points.get2(i, 1);
            mean_dist += (dx * dx + dy * dy).sqrt();
            count += 1;
        }
        mean_dist /= count as f64;

        // Independent Monte-Carlo oracle for E‖ε‖.
        let mut oracle_rng = Rng::new(99);
        let draws = 100_000;
        let mut oracle = 0.0;
        for _ in 0..draws {
            let (dx, dy) = (noise * oracle_rng.normal(), noise * oracle_rng.normal());
            oracle += (dx * dx + dy * dy).sqrt();
        }
        oracle /= draws as f64;

        let analytic = noise * (std::f64::consts::PI / 2.0).sqrt();
        assert!((oracle - analytic).abs() / analytic < 0.02, "oracle {oracle}");
        assert!(
            (mean_dist - analytic).abs() / analytic < 0.10,
            "mean displacement {mean_dist} vs {analytic}"
        );
    }

    #[test]
    fn rotate_zero_and_full_turn_are_identity() {
        let set = make_two_moons(50, 0.1, &mut Rng::new(3)).unwrap();
        let zero = rotate(&set, 0.0);
        for i in 0..set.len() {
            assert!((zero.points.get2(i, 0) - set.points.get2(i, 0)).abs() < 1e-12);
            assert!((zero.points.get2(i, 1) - set.points.get2(i, 1)).abs() < 1e-12);
        }
        let full = rotate(&set, 360.0);
        for i in 0..set.len() {
            assert!((full.points.get2(i, 0) - set.points.get2(i, 0)).abs() < 1e-9);
            assert!((full.points.get2(i, 1) - set.points.get2(i, 1)).abs() < 1e-9);
        }
    }

    #[test]
    fn rotate_composes() {
        let set = make_two_moons(80, 0.1, &mut Rng::new(4)).unwrap();
        let twice = rotate(&rotate(&set, 30.0), 30.0);
        let once = rotate(&set, 60.0);
        for i in 0..set.len() {
            assert!((twice.points.get2(i, 0) - once.points.get2(i, 0)).abs() < 1e-9);
            assert!((twice.points.get2(i, 1) - once.points.get2(i, 1)).abs() < 1e-9);
        }
    }

    #[test]
    fn rotate_is_an_isometry() {
        let set = make_two_moons(40, 0.2, &mut Rng::new(6)).unwrap();
        let rotated = rotate(&set, 123.4);
        for i in 0..set.len() {
            for j in (i + 1)..set.len() {
                let d0 = {
                    let dx = set.points.get2(i, 0) - set.points.get2(j, 0);
                    let dy = set.points.get2(i, 1) - set.points.get2(j, 1);
                    (dx * dx + dy * dy).sqrt()
                };
                let d1 = {
                    let dx = rotated.points.get2(i, 0) - rotated.points.get2(j, 0);
                    let dy = rotated.points.get2(i, 1) - rotated.points.get2(j, 1);
                    (dx * dx + dy * dy).sqrt()
                };
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mixture_means_on_circle() {
        let (labeled, unlabeled) =
            make_gaussian_mixture(2, 10, 100, 4.0, 0.5, &mut Rng::new(7)).unwrap();
        assert_eq!(labeled.len(), 20);
        assert_eq!(unlabeled.shape(), &[100, 2]);
        // Class 0 blob sits near (4, 0), class 1 near (−4, 0).
        let (c0, c1): (Vec<usize>, Vec<usize>) =
            (0..labeled.len()).partition(|&i| labeled.labels[i] == 0);
        for (idxs, mx) in [(c0, 4.0), (c1, -4.0)] {
            let mean_x: f64 =
                idxs.iter().map(|&i| labeled.points.get2(i, 0)).sum::<f64>() / idxs.len() as f64;
            assert!((mean_x - mx).abs() < 0.6, "mean_x {mean_x} vs {mx}");
        }
    }

    #[test]
    fn mixture_bayes_rule_near_perfect_when_well_separated() {
        // separation/noise = 8: nearest-mean classification on a large draw
        // exceeds 99%.
        let (labeled, _) =
            make_gaussian_mixture(2, 5_000, 1, 4.0, 0.5, &mut Rng::new(8)).unwrap();
        let mut correct = 0;
        for i in 0..labeled.len() {
            let (x, y) = (labeled.points.get2(i, 0), labeled.points.get2(i, 1));
            let d0 = (x - 4.0).powi(2) + y * y;
            let d1 = (x + 4.0).powi(2) + y * y;
            let pred = usize::from(d1 < d0);
            if pred == labeled.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / labeled.len() as f64;
        assert!(acc > 0.99, "bayes accuracy {acc}");
    }

    #[test]
    fn batches_partition_each_epoch() {
        let it = batch_iter(10, 5, Rng::new(9), 1).unwrap();
        let batches: Vec<Vec<usize>> = it.collect();
        assert_eq!(batches.len(), 2);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn short_final_batch_is_dropped() {
        let it = batch_iter(10, 4, Rng::new(10), 1).unwrap();
        let batches: Vec<Vec<usize>> = it.collect();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches.concat().len(), 8);
    }

    #[test]
    fn batch_sequence_is_seed_deterministic() {
        let a: Vec<Vec<usize>> = batch_iter(20, 6, Rng::new(11), 3).unwrap().collect();
        let b: Vec<Vec<usize>> = batch_iter(20, 6, Rng::new(11), 3).unwrap().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_iter_rejects_oversize_batch() {
        assert!(batch_iter(4, 5, Rng::new(0), 1).is_err());
    }

    #[test]
    fn generators_are_pure_functions_of_seed() {
        let a = make_two_moons(64, 0.1, &mut Rng::new(12)).unwrap();
        let b = make_two_moons(64, 0.1, &mut Rng::new(12)).unwrap();
        assert_eq!(a, b);
        let (la, ua) = make_gaussian_mixture(3, 4, 50, 2.0, 1.0, &mut Rng::new(13)).unwrap();
        let (lb, ub) = make_gaussian_mixture(3, 4, 50, 2.0, 1.0, &mut Rng::new(13)).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ua, ub);
    }

    #[test]
    fn csv_round_trip() {
        let source = make_two_moons(10, 0.1, &mut Rng::new(14)).unwrap();
        let target = rotate(&source, 30.0);
        let mut buf = Vec::new();
        write_csv(&mut buf, &[("source", &source), ("target", &target)]).unwrap();
        let groups = read_csv(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].0, "source");
        assert_eq!(groups[0].1.labels, source.labels);
        for i in 0..source.len() {
            assert!((groups[0].1.points.get2(i, 0) - source.points.get2(i, 0)).abs() < 1e-12);
        }
    }
}
