//! Escape unlearning: class centroids, the minimax direction solver, and the
//! forget loss.
//!
//! The solver looks for the unit direction whose worst-case inner product
//! with the retain-class centroids is smallest, by projected subgradient
//! descent on the sphere: step against the active centroid (or a smoothed
//! mixture), renormalize, decay the step cosine-style, and keep the best of
//! several random restarts. Ties are broken deterministically.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Exact per-class mean of contributing embeddings.
#[derive(Clone, Debug)]
pub struct Centroid<T: Scalar> {
    pub class_id: usize,
    pub vector: Vec<T>,
    pub sample_count: usize,
}

/// Solver output: unit direction plus the exact objective value it attains.
#[derive(Clone, Debug)]
pub struct EscapeDirection<T: Scalar> {
    pub direction: Vec<T>,
    pub minimax_value: T,
}

/// Scaled escape target: `point == lambda_esc * direction` exactly.
#[derive(Clone, Debug)]
pub struct EscapeTarget<T: Scalar> {
    pub direction: Vec<T>,
    pub lambda_esc: T,
    pub point: Vec<T>,
    pub minimax_value: T,
}

impl<T: Scalar> EscapeTarget<T> {
    pub fn from_direction(dir: EscapeDirection<T>, lambda_esc: T) -> Result<Self> {
        let point = escape_point(&dir.direction, lambda_esc)?;
        Ok(EscapeTarget {
            direction: dir.direction,
            lambda_esc,
            point,
            minimax_value: dir.minimax_value,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeSolverOpts {
    pub iters: usize,
    pub step: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Log-sum-exp smoothing temperature; `None` uses the plain subgradient.
    pub smoothing_temperature: Option<f64>,
}

impl Default for EscapeSolverOpts {
    fn default() -> Self {
        EscapeSolverOpts {
            iters: 500,
            step: 0.05,
            restarts: 16,
            seed: 0,
            smoothing_temperature: None,
        }
    }
}

/// Candidates whose objective lies within this band of the best are treated
/// as equally optimal and resolved by the lexicographic tie-break.
const TIE_BAND: f64 = 1e-6;
/// Coordinate rounding grid for the tie-break comparison.
const TIE_GRID: f64 = 1e-9;

/// One centroid per distinct label: exact arithmetic means of the rows of
/// `embeddings: [N x d]`.
pub fn centroids<T: Scalar>(embeddings: &Tensor<T>, labels: &[usize]) -> Result<Vec<Centroid<T>>> {
    let shape = embeddings.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::contract(
            "centroids",
            format!("need non-empty [N x d] embeddings, got {shape:?}"),
        ));
    }
    if labels.len() != shape[0] {
        return Err(Error::Dimension {
            op: "centroids",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let d = shape[1];
    let values = embeddings.values();
    let mut acc: BTreeMap<usize, (Vec<T>, usize)> = BTreeMap::new();
    for (i, &label) in labels.iter().enumerate() {
        let entry = acc.entry(label).or_insert_with(|| (vec![T::zero(); d], 0));
        for j in 0..d {
            entry.0[j] += values[i * d + j];
        }
        entry.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(class_id, (sum, count))| {
            let n = T::from_f(count as f64);
            Centroid {
                class_id,
                vector: sum.into_iter().map(|v| v / n).collect(),
                sample_count: count,
            }
        })
        .collect())
}

/// Minimizes `max_i <d, c_i>` over the unit sphere. The reported value is
/// recomputed exactly for the returned direction.
pub fn solve_escape_direction<T: Scalar>(
    retain_centroids: &[Centroid<T>],
    opts: &EscapeSolverOpts,
) -> Result<EscapeDirection<T>> {
    if retain_centroids.is_empty() {
        return Err(Error::contract("solve_escape_direction", "no centroids"));
    }
    let dim = retain_centroids[0].vector.len();
    for c in retain_centroids {
        if c.vector.len() != dim {
            return Err(Error::Dimension {
                op: "solve_escape_direction",
                lhs: vec![dim],
                rhs: vec![c.vector.len()],
            });
        }
        if c.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(
                "solve_escape_direction",
                format!("non-finite centroid for class {}", c.class_id),
            ));
        }
    }
    if dim == 1 {
        // Degenerate line: only two unit directions exist.
        let scored: Vec<(Vec<T>, T)> = vec![vec![T::one()], vec![-T::one()]]
            .into_iter()
            .map(|d| {
                let v = objective(&d, retain_centroids);
                (d, v)
            })
            .collect();
        return Ok(pick_candidate(scored, retain_centroids));
    }

    let mut candidates: Vec<(Vec<T>, T)> = Vec::with_capacity(opts.restarts.max(1));
    for restart in 0..opts.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(
            opts.seed
                .wrapping_add((restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        let mut d = random_unit::<T>(dim, &mut rng);
        for t in 0..opts.iters {
            let frac = t as f64 / opts.iters.max(1) as f64;
            let step = opts.step * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
            if !take_step(&mut d, retain_centroids, opts, step) {
                break;
            }
        }
        // Diminishing-step polish: at a nonsmooth optimum the iterate
        // bisects toward the kink, pushing endpoint noise well under the
        // tie-break grid.
        let mut step = opts.step * 0.1;
        for _ in 0..POLISH_STEPS {
            if !take_step(&mut d, retain_centroids, opts, step) {
                break;
            }
            step *= POLISH_DECAY;
        }
        let value = objective(&d, retain_centroids);
        candidates.push((d, value));
    }
    Ok(pick_candidate(candidates, retain_centroids))
}

const POLISH_STEPS: usize = 160;
const POLISH_DECAY: f64 = 0.85;

/// One normalized-direction subgradient step; the step size is angular, so
/// trajectories do not depend on the centroid scale. Returns false once the
/// subgradient vanishes.
fn take_step<T: Scalar>(
    d: &mut [T],
    centroids: &[Centroid<T>],
    opts: &EscapeSolverOpts,
    step: f64,
) -> bool {
    let mut g = subgradient(d, centroids, opts.smoothing_temperature);
    if !normalize(&mut g) {
        return false;
    }
    let step_t = T::from_f(step);
    for j in 0..d.len() {
        d[j] = d[j] - step_t * g[j];
    }
    normalize(d)
}

fn pick_candidate<T: Scalar>(
    candidates: Vec<(Vec<T>, T)>,
    centroids: &[Centroid<T>],
) -> EscapeDirection<T> {
    let best = candidates
        .iter()
        .map(|(_, v)| v.to_f())
        .fold(f64::INFINITY, f64::min);
    let band = T::from_f(best + TIE_BAND);
    // Among equally optimal candidates, take the lexicographically greatest
    // coordinate vector after rounding; symmetric configurations then have a
    // fixed winner instead of a seed-dependent one.
    let mut eligible: Vec<Vec<T>> = candidates
        .into_iter()
        .filter(|(_, v)| *v <= band)
        .map(|(d, _)| d)
        .collect();
    eligible.sort_by(|a, b| {
        for (x, y) in a.iter().zip(b.iter()) {
            let rx = round_to_grid(x.to_f());
            let ry = round_to_grid(y.to_f());
            if rx != ry {
                return rx.partial_cmp(&ry).unwrap();
            }
        }
        std::cmp::Ordering::Equal
    });
    let mut direction = eligible.pop().expect("at least one candidate");
    normalize(&mut direction);
    // Exact objective for the direction actually returned; the solver never
    // reports a value better than it achieves.
    let minimax_value = objective(&direction, centroids);
    EscapeDirection {
        direction,
        minimax_value,
    }
}

fn round_to_grid(x: f64) -> f64 {
    (x / TIE_GRID).round() * TIE_GRID
}

fn objective<T: Scalar>(d: &[T], centroids: &[Centroid<T>]) -> T {
    centroids
        .iter()
        .map(|c| dot(d, &c.vector))
        .fold(T::neg_infinity(), T::max)
}

fn subgradient<T: Scalar>(
    d: &[T],
    centroids: &[Centroid<T>],
    smoothing: Option<f64>,
) -> Vec<T> {
    let scores: Vec<T> = centroids.iter().map(|c| dot(d, &c.vector)).collect();
    match smoothing {
        None => {
            // First index attaining the max keeps ties deterministic.
            let mut best = 0;
            for (i, s) in scores.iter().enumerate() {
                if *s > scores[best] {
                    best = i;
                }
            }
            centroids[best].vector.clone()
        }
        Some(tau) => {
            let tau_t = T::from_f(tau);
            let maxv = scores.iter().copied().fold(T::neg_infinity(), T::max);
            let weights: Vec<T> = scores.iter().map(|&s| ((s - maxv) * tau_t).exp()).collect();
            let total: T = weights.iter().copied().sum();
            let dim = d.len();
            let mut g = vec![T::zero(); dim];
            for (w, c) in weights.iter().zip(centroids.iter()) {
                let wn = *w / total;
                for j in 0..dim {
                    g[j] += wn * c.vector[j];
                }
            }
            g
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum()
}

fn normalize<T: Scalar>(v: &mut [T]) -> bool {
    let norm = dot(v, v).sqrt();
    if norm.to_f() < 1e-12 {
        return false;
    }
    for x in v.iter_mut() {
        *x = *x / norm;
    }
    true
}

fn random_unit<T: Scalar>(dim: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    loop {
        let mut v: Vec<T> = (0..dim)
            .map(|_| {
                let n: f64 = rng.sample(StandardNormal);
                T::from_f(n)
            })
            .collect();
        if normalize(&mut v) {
            return v;
        }
    }
}

/// `t_escape = lambda_esc * d`; requires a unit direction and positive scale.
pub fn escape_point<T: Scalar>(direction: &[T], lambda_esc: T) -> Result<Vec<T>> {
    let norm = dot(direction, direction).sqrt().to_f();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::contract(
            "escape_point",
            format!("direction norm {norm} is not 1 within 1e-6"),
        ));
    }
    if lambda_esc <= T::zero() {
        return Err(Error::contract(
            "escape_point",
            format!("lambda_esc must be positive, got {lambda_esc}"),
        ));
    }
    Ok(direction.iter().map(|&x| x * lambda_esc).collect())
}

/// MSE between each embedding row and the escape target, mean-reduced over
/// batch and features; differentiable toward the embeddings.
pub fn forget_loss<T: Scalar>(embeddings: &Tensor<T>, target: &[T]) -> Result<Tensor<T>> {
    let shape = embeddings.shape();
    if shape.len() != 2 || shape[1] != target.len() {
        return Err(Error::Dimension {
            op: "forget_loss",
            lhs: shape,
            rhs: vec![target.len()],
        });
    }
    let batch = shape[0];
    let mut tiled = Vec::with_capacity(batch * target.len());
    for _ in 0..batch {
        tiled.extend_from_slice(target);
    }
    let target_t = Tensor::from_vec(vec![batch, target.len()], tiled)?;
    embeddings.mse(&target_t)
}

/// A set of labeled points for geometry export.
pub struct GeometrySnapshot<'a, T: Scalar> {
    pub centroids: &'a [Centroid<T>],
    /// `(class_id, vector)` pairs for individual samples.
    pub embeddings: &'a [(usize, Vec<T>)],
}

impl<'a, T: Scalar> GeometrySnapshot<'a, T> {
    pub fn empty() -> GeometrySnapshot<'static, T> {
        GeometrySnapshot {
            centroids: &[],
            embeddings: &[],
        }
    }
}

/// Writes before/after centroids and samples plus the escape point as a
/// comma-delimited text file for offline plotting. Floats carry 17
/// significant digits so values round-trip.
pub fn export_geometry<T: Scalar>(
    before: GeometrySnapshot<'_, T>,
    after: GeometrySnapshot<'_, T>,
    target: &EscapeTarget<T>,
    path: &Path,
) -> Result<()> {
    let dim = target.point.len();
    let check_dim = |v: &[T]| -> Result<()> {
        if v.len() != dim {
            return Err(Error::Dimension {
                op: "export_geometry",
                lhs: vec![dim],
                rhs: vec![v.len()],
            });
        }
        Ok(())
    };
    let mut out = String::new();
    out.push_str("phase,class_id,kind");
    for j in 0..dim {
        out.push_str(&format!(",e{j}"));
    }
    out.push('\n');
    let mut write_row = |phase: &str, class_id: i64, kind: &str, v: &[T]| {
        out.push_str(&format!("{phase},{class_id},{kind}"));
        for x in v {
            out.push_str(&format!(",{:.16e}", x.to_f()));
        }
        out.push('\n');
    };
    for (phase, snap) in [("before", &before), ("after", &after)] {
        for c in snap.centroids {
            check_dim(&c.vector)?;
            write_row(phase, c.class_id as i64, "centroid", &c.vector);
        }
        for (class_id, v) in snap.embeddings {
            check_dim(v)?;
            write_row(phase, *class_id as i64, "sample", v);
        }
    }
    write_row("target", -1, "escape", &target.point);
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdiff::{max_rel_err, numeric_grad};
    use rand::Rng;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        dot.clamp(-1.0, 1.0).acos().to_degrees()
    }

    fn centroid(class_id: usize, v: &[f64]) -> Centroid<f64> {
        Centroid {
            class_id,
            vector: v.to_vec(),
            sample_count: 1,
        }
    }

    /// Test-side oracle: dense direction grid. Golden-spiral points on the
    /// sphere in 3-D, uniform angles on the circle in 2-D.
    fn grid_minimax(centroids: &[Centroid<f64>], n: usize) -> (Vec<f64>, f64) {
        let dim = centroids[0].vector.len();
        let mut best_dir = vec![0.0; dim];
        let mut best_val = f64::INFINITY;
        let score = |d: &[f64]| -> f64 {
            centroids
                .iter()
                .map(|c| c.vector.iter().zip(d.iter()).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        };
        match dim {
            2 => {
                for k in 0..n {
                    let theta = 2.0 * std::f64::consts::PI * (k as f64) / (n as f64);
                    let d = vec![theta.cos(), theta.sin()];
                    let v = score(&d);
                    if v < best_val {
                        best_val = v;
                        best_dir = d;
                    }
                }
            }
            3 => {
                let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
                for k in 0..n {
                    let y = 1.0 - 2.0 * (k as f64 + 0.5) / (n as f64);
                    let r = (1.0 - y * y).sqrt();
                    let theta = golden * k as f64;
                    let d = vec![r * theta.cos(), y, r * theta.sin()];
                    let v = score(&d);
                    if v < best_val {
                        best_val = v;
                        best_dir = d;
                    }
                }
            }
            _ => panic!("grid oracle supports d in {{2, 3}}"),
        }
        (best_dir, best_val)
    }

    #[test]
    fn centroid_single_sample_per_class() {
        let emb = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cents = centroids(&emb, &[7, 3]).unwrap();
        assert_eq!(cents.len(), 2);
        assert_eq!(cents[0].class_id, 3);
        assert_eq!(cents[0].vector, vec![3.0, 4.0]);
        assert_eq!(cents[1].vector, vec![1.0, 2.0]);
    }

    #[test]
    fn centroid_mean_of_two() {
        let emb = Tensor::from_vec(vec![2, 2], vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        let cents = centroids(&emb, &[0, 0]).unwrap();
        assert_eq!(cents[0].vector, vec![1.0, 1.0]);
        assert_eq!(cents[0].sample_count, 2);
    }

    #[test]
    fn centroid_matches_two_pass_mean() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let d = 8;
        let vals: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 5).collect();
        let emb = Tensor::from_vec(vec![n, d], vals.clone()).unwrap();
        let cents = centroids(&emb, &labels).unwrap();
        // Independent two-pass route: count first, then accumulate x/n.
        for c in &cents {
            let count = labels.iter().filter(|&&l| l == c.class_id).count();
            let mut mean = vec![0.0; d];
            for (i, &l) in labels.iter().enumerate() {
                if l == c.class_id {
                    for j in 0..d {
                        mean[j] += vals[i * d + j] / count as f64;
                    }
                }
            }
            for j in 0..d {
                assert!((mean[j] - c.vector[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn centroids_reject_empty_input() {
        let emb = Tensor::<f64>::zeros(vec![0, 4]);
        assert!(centroids(&emb, &[]).is_err());
    }

    #[test]
    fn single_centroid_antipode_within_tenth_degree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let opts = EscapeSolverOpts::default();
        for trial in 0..50 {
            let dim = 2 + (trial % 5);
            let c: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0_f64)).collect();
            if c.iter().map(|x| x * x).sum::<f64>().sqrt() < 0.1 {
                continue;
            }
            let sol = solve_escape_direction(&[centroid(0, &c)], &opts).unwrap();
            let antipode = unit(&c.iter().map(|x| -x).collect::<Vec<_>>());
            let ang = angle_deg(&sol.direction, &antipode);
            assert!(ang < 0.1, "trial {trial}: angle {ang} deg");
            let norm_c = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((sol.minimax_value + norm_c).abs() < 1e-6);
        }
    }

    #[test]
    fn symmetric_pair_resolves_by_tie_break() {
        let cents = vec![centroid(0, &[1.0, 0.0]), centroid(1, &[-1.0, 0.0])];
        let sol = solve_escape_direction(&cents, &EscapeSolverOpts::default()).unwrap();
        assert!(sol.minimax_value.abs() < 1e-4, "value {}", sol.minimax_value);
        // Both equator points are optimal; the tie-break picks +y.
        assert!(
            angle_deg(&sol.direction, &[0.0, 1.0]) < 1.0,
            "direction {:?}",
            sol.direction
        );
    }

    #[test]
    fn three_random_centroids_match_grid_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let opts = EscapeSolverOpts::default();
        for trial in 0..5 {
            let cents: Vec<Centroid<f64>> = (0..3)
                .map(|i| {
                    let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.5..1.5_f64)).collect();
                    centroid(i, &v)
                })
                .collect();
            let sol = solve_escape_direction(&cents, &opts).unwrap();
            let (grid_dir, grid_val) = grid_minimax(&cents, 1_000_000);
            assert!(
                sol.minimax_value <= grid_val + 1e-3,
                "trial {trial}: solver {} vs grid {grid_val}",
                sol.minimax_value
            );
            let ang = angle_deg(&sol.direction, &grid_dir);
            assert!(ang < 1.0, "trial {trial}: angle {ang} deg");
        }
    }

    #[test]
    fn solver_value_is_exact_for_returned_direction() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let cents: Vec<Centroid<f64>> = (0..4)
                .map(|i| {
                    let v: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0_f64)).collect();
                    centroid(i, &v)
                })
                .collect();
            let sol = solve_escape_direction(&cents, &EscapeSolverOpts::default()).unwrap();
            let recomputed = cents
                .iter()
                .map(|c| {
                    c.vector
                        .iter()
                        .zip(sol.direction.iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(sol.minimax_value, recomputed);
            let norm: f64 = sol.direction.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn direction_is_scale_invariant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let cents: Vec<Centroid<f64>> = (0..3)
                .map(|i| {
                    let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0_f64)).collect();
                    centroid(i, &v)
                })
                .collect();
            let scaled: Vec<Centroid<f64>> = cents
                .iter()
                .map(|c| Centroid {
                    class_id: c.class_id,
                    vector: c.vector.iter().map(|x| x * 3.7).collect(),
                    sample_count: c.sample_count,
                })
                .collect();
            let a = solve_escape_direction(&cents, &EscapeSolverOpts::default()).unwrap();
            let b = solve_escape_direction(&scaled, &EscapeSolverOpts::default()).unwrap();
            let ang = angle_deg(&a.direction, &b.direction);
            assert!(ang < 1.0, "angle {ang}");
        }
    }

    #[test]
    fn one_dimensional_case_returns_opposite_sign() {
        let sol =
            solve_escape_direction(&[centroid(0, &[2.5])], &EscapeSolverOpts::default()).unwrap();
        assert_eq!(sol.direction, vec![-1.0]);
        assert_eq!(sol.minimax_value, -2.5);
    }

    #[test]
    fn smoothed_solver_agrees_on_single_centroid() {
        let opts = EscapeSolverOpts {
            smoothing_temperature: Some(50.0),
            ..EscapeSolverOpts::default()
        };
        let sol = solve_escape_direction(&[centroid(0, &[0.0, 3.0, 0.0])], &opts).unwrap();
        assert!(angle_deg(&sol.direction, &[0.0, -1.0, 0.0]) < 0.1);
    }

    #[test]
    fn escape_point_contracts() {
        let p = escape_point(&[-1.0, 0.0, 0.0], 10.0).unwrap();
        assert_eq!(p, vec![-10.0, 0.0, 0.0]);
        let on_sphere = escape_point(&[0.6, 0.8], 1.0).unwrap();
        let norm: f64 = on_sphere.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(escape_point(&[0.5, 0.5], 10.0).is_err());
        assert!(escape_point(&[1.0, 0.0], 0.0).is_err());
        assert!(escape_point(&[1.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn escape_point_norm_homogeneity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let raw: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0_f64)).collect();
            let d = unit(&raw);
            let lambda = rng.gen_range(0.1..20.0);
            let p = escape_point(&d, lambda).unwrap();
            let norm: f64 = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - lambda).abs() < 1e-9 * lambda.max(1.0));
        }
    }

    #[test]
    fn forget_loss_trivial_cases() {
        let emb = Tensor::from_vec(vec![2, 2], vec![5.0, -1.0, 5.0, -1.0]).unwrap();
        assert_eq!(forget_loss(&emb, &[5.0, -1.0]).unwrap().item(), 0.0);
        let single = Tensor::<f64>::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert!((forget_loss(&single, &[0.0, 0.0]).unwrap().item() - 0.5).abs() < 1e-15);
        assert!(forget_loss(&single, &[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn forget_loss_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        let e0: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let emb = Tensor::param(vec![3, 4], e0.clone()).unwrap();
        forget_loss(&emb, &target).unwrap().backward().unwrap();
        let f = |x: &[f64]| {
            forget_loss(
                &Tensor::from_vec(vec![3, 4], x.to_vec()).unwrap(),
                &target,
            )
            .unwrap()
            .item()
        };
        assert!(
            max_rel_err(&emb.grad().unwrap(), &numeric_grad(f, &e0, 1e-5)) < 1e-6
        );
    }

    #[test]
    fn geometry_export_round_trips() {
        let dir_holder = tempfile::tempdir().unwrap();
        let path = dir_holder.path().join("geometry.csv");
        let cents = vec![centroid(0, &[0.12345678901234567, -1.0, 2.0])];
        let samples = vec![(1usize, vec![0.5, 0.25, -0.125])];
        let target = EscapeTarget::from_direction(
            EscapeDirection {
                direction: vec![0.0, 0.0, -1.0],
                minimax_value: -2.0,
            },
            10.0,
        )
        .unwrap();
        export_geometry(
            GeometrySnapshot {
                centroids: &cents,
                embeddings: &samples,
            },
            GeometrySnapshot::<f64>::empty(),
            &target,
            &path,
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "phase,class_id,kind,e0,e1,e2");
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(&first[..3], &["before", "0", "centroid"]);
        // 17 significant digits round-trip exactly.
        assert_eq!(first[3].parse::<f64>().unwrap(), 0.12345678901234567);
        let rows: Vec<&str> = text.lines().collect();
        let escape_row = rows.last().unwrap();
        assert!(escape_row.starts_with("target,-1,escape"));
    }

    #[test]
    fn geometry_export_unwritable_path_errors() {
        let target = EscapeTarget::from_direction(
            EscapeDirection {
                direction: vec![1.0, 0.0],
                minimax_value: 0.0,
            },
            1.0,
        )
        .unwrap();
        let result = export_geometry(
            GeometrySnapshot::<f64>::empty(),
            GeometrySnapshot::<f64>::empty(),
            &target,
            Path::new("/nonexistent-root-dir/geometry.csv"),
        );
        assert!(matches!(result, Err(Error::Io(_))));
    }
}
