//! Scalar training objectives: cross-entropy, prediction entropy,
//! multi-bandwidth Gaussian MMD and the proximal penalty.
//!
//! All objectives are differentiable graph ops; the free functions here
//! resolve kernel bandwidths, compose the proximal term, and offer
//! forward-only conveniences on plain tensors.

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamBinding, Var};
use crate::params::ParameterSet;
use crate::tensor::{Element, Tensor};

/// How the base kernel bandwidth (sigma^2) is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median pairwise squared distance of the joint sample, recomputed per
    /// call and treated as a constant (no gradient through it). Falls back
    /// to 1.0 when the median is (near) zero.
    MedianHeuristic,
    /// Fixed sigma^2.
    Fixed(f64),
}

/// Gaussian RBF mixture kernel: `k(a,b) = sum_s exp(-|a-b|^2 / (2 s))` with
/// `s = base * multiplier` for each multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub bandwidth: Bandwidth,
    pub multipliers: Vec<f64>,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            bandwidth: Bandwidth::MedianHeuristic,
            multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0],
        }
    }
}

impl KernelSpec {
    pub fn fixed(sigma_sq: f64) -> Self {
        KernelSpec {
            bandwidth: Bandwidth::Fixed(sigma_sq),
            multipliers: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.multipliers.is_empty() {
            return Err(Error::config("kernel multipliers must be non-empty"));
        }
        if self.multipliers.iter().any(|&m| m <= 0.0) {
            return Err(Error::config("kernel multipliers must be positive"));
        }
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if s <= 0.0 {
                return Err(Error::config("fixed kernel bandwidth must be positive"));
            }
        }
        Ok(())
    }

    /// Resolve the concrete bandwidth list for two sample sets given as
    /// row-major matrices over the same feature dimension.
    pub fn resolve<T: Element>(&self, x: &[T], y: &[T], dim: usize) -> Result<Vec<f64>> {
        self.validate()?;
        let base = match self.bandwidth {
            Bandwidth::Fixed(s) => s,
            Bandwidth::MedianHeuristic => {
                let med = median_pairwise_sq_dist(x, y, dim);
                if med <= 1e-12 {
                    1.0
                } else {
                    med
                }
            }
        };
        Ok(self.multipliers.iter().map(|m| m * base).collect())
    }
}

/// Median of squared distances over all unordered pairs of the joint sample.
/// With an even pair count the upper median is taken.
fn median_pairwise_sq_dist<T: Element>(x: &[T], y: &[T], dim: usize) -> f64 {
    let n = x.len() / dim;
    let m = y.len() / dim;
    let total = n + m;
    let row = |i: usize| -> &[T] {
        if i < n {
            &x[i * dim..(i + 1) * dim]
        } else {
            let j = i - n;
            &y[j * dim..(j + 1) * dim]
        }
    };
    let mut dists: Vec<f64> = Vec::with_capacity(total * (total - 1) / 2);
    for i in 0..total {
        for j in (i + 1)..total {
            let (a, b) = (row(i), row(j));
            let mut d = 0.0f64;
            for c in 0..dim {
                let diff = (a[c] - b[c]).as_f64();
                d += diff * diff;
            }
            dists.push(d);
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(f64::total_cmp);
    dists[dists.len() / 2]
}

/// Differentiable squared MMD between the rows of two graph nodes.
pub fn mmd_var<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    y: Var,
    kernel: &KernelSpec,
) -> Result<Var> {
    let dim = *g
        .shape(x)
        .last()
        .ok_or_else(|| Error::config("mmd operands must be matrices"))?;
    let bandwidths = kernel.resolve(g.data(x), g.data(y), dim)?;
    g.mmd(x, y, &bandwidths)
}

/// Forward-only squared MMD between two sample matrices.
pub fn mmd_value<T: Element>(x: &Tensor<T>, y: &Tensor<T>, kernel: &KernelSpec) -> Result<T> {
    let mut g: Graph<T> = Graph::new();
    let xv = g.constant(x);
    let yv = g.constant(y);
    let v = mmd_var(&mut g, xv, yv, kernel)?;
    Ok(g.scalar(v))
}

/// Forward-only mean cross-entropy.
pub fn cross_entropy_value<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let mut g: Graph<T> = Graph::new();
    let lv = g.constant(logits);
    let v = g.cross_entropy(lv, labels)?;
    Ok(g.scalar(v))
}

/// Forward-only mean prediction entropy.
pub fn entropy_value<T: Element>(logits: &Tensor<T>) -> Result<T> {
    let mut g: Graph<T> = Graph::new();
    let lv = g.constant(logits);
    let v = g.entropy(lv)?;
    Ok(g.scalar(v))
}

/// Differentiable FedProx penalty `(mu/2) * |theta - theta_ref|^2` over the
/// trainable entries of `local`, with `reference` treated as constant.
///
/// Returns the scalar node plus the bindings of the local parameter leaves
/// so the caller can harvest gradients (`mu * (theta - theta_ref)`).
pub fn proximal_penalty_var<T: Element>(
    g: &mut Graph<T>,
    local: &ParameterSet<T>,
    reference: &ParameterSet<T>,
    mu: f64,
) -> Result<(Var, Vec<ParamBinding>)> {
    if mu < 0.0 {
        return Err(Error::config("proximal coefficient must be non-negative"));
    }
    local.check_compatible(reference)?;
    let mut bindings = Vec::new();
    let mut total: Option<Var> = None;
    for (entry, ref_entry) in local.iter().zip(reference.iter()) {
        if !entry.tensor.requires_grad() {
            continue;
        }
        let w = g.param(&entry.tensor);
        bindings.push(ParamBinding {
            name: entry.name.clone(),
            var: w,
        });
        let r = g.constant(&ref_entry.tensor);
        let neg_r = g.scale(r, T::from_f64(-1.0))?;
        let diff = g.add(w, neg_r)?;
        let sq = g.mul(diff, diff)?;
        let s = g.sum_all(sq)?;
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::config("no trainable parameters for proximal term"))?;
    let scaled = g.scale(total, T::from_f64(mu / 2.0))?;
    Ok((scaled, bindings))
}

/// Forward-only proximal penalty value.
pub fn proximal_penalty_value<T: Element>(
    local: &ParameterSet<T>,
    reference: &ParameterSet<T>,
    mu: f64,
) -> Result<T> {
    let mut g: Graph<T> = Graph::new();
    let (v, _) = proximal_penalty_var(&mut g, local, reference, mu)?;
    Ok(g.scalar(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Role;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Naive direct double-sum oracle for the V-statistic squared MMD.
    pub fn mmd_oracle(x: &[Vec<f64>], y: &[Vec<f64>], bandwidths: &[f64]) -> f64 {
        let k = |a: &[f64], b: &[f64]| -> f64 {
            let d2: f64 = a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum();
            bandwidths.iter().map(|bw| (-d2 / (2.0 * bw)).exp()).sum()
        };
        let n = x.len() as f64;
        let m = y.len() as f64;
        let mut xx = 0.0;
        for a in x {
            for b in x {
                xx += k(a, b);
            }
        }
        let mut yy = 0.0;
        for a in y {
            for b in y {
                yy += k(a, b);
            }
        }
        let mut xy = 0.0;
        for a in x {
            for b in y {
                xy += k(a, b);
            }
        }
        xx / (n * n) + yy / (m * m) - 2.0 * xy / (n * m)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, spread: f64) -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..cols).map(|_| rng.gen::<f64>() * spread - spread / 2.0).collect())
            .collect()
    }

    fn to_tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn mmd_matches_oracle_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let n = 1 + rng.gen_range(0..64);
            let m = 1 + rng.gen_range(0..64);
            let d = 1 + rng.gen_range(0..8);
            let x = random_matrix(&mut rng, n, d, 4.0);
            let y = random_matrix(&mut rng, m, d, 4.0);
            let spec = KernelSpec::default();
            let bw = spec
                .resolve(&to_tensor(&x).data().to_vec(), &to_tensor(&y).data().to_vec(), d)
                .unwrap();
            let expected = mmd_oracle(&x, &y, &bw);
            let got = mmd_value(&to_tensor(&x), &to_tensor(&y), &spec).unwrap();
            let rel = (got - expected).abs() / expected.abs().max(1e-30);
            assert!(rel < 1e-10, "trial {trial}: {got} vs {expected}");
        }
    }

    #[test]
    fn mmd_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = to_tensor(&random_matrix(&mut rng, 9, 3, 2.0));
        let y = to_tensor(&random_matrix(&mut rng, 7, 3, 2.0));
        let spec = KernelSpec::default();
        let a = mmd_value(&x, &y, &spec).unwrap();
        let b = mmd_value(&y, &x, &spec).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!(a >= -1e-12);
    }

    #[test]
    fn mmd_identical_sets_zero_and_hand_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = to_tensor(&random_matrix(&mut rng, 12, 4, 3.0));
        let spec = KernelSpec::default();
        assert_eq!(mmd_value(&x, &x, &spec).unwrap(), 0.0);

        let a = Tensor::from_rows(&[vec![0.0f64]]).unwrap();
        let b = Tensor::from_rows(&[vec![2.0f64]]).unwrap();
        let got = mmd_value(&a, &b, &KernelSpec::fixed(1.0)).unwrap();
        let expected = 2.0 - 2.0 * (-2.0f64).exp();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn mmd_separated_clouds_exceed_same_distribution() {
        let spec = KernelSpec::default();
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let sigma = 1.0;
            let near: Vec<Vec<f64>> = (0..64)
                .map(|_| (0..4).map(|_| rng.gen::<f64>() * sigma).collect())
                .collect();
            let near2: Vec<Vec<f64>> = (0..64)
                .map(|_| (0..4).map(|_| rng.gen::<f64>() * sigma).collect())
                .collect();
            let far: Vec<Vec<f64>> = (0..64)
                .map(|_| (0..4).map(|_| 10.0 * sigma + rng.gen::<f64>() * sigma).collect())
                .collect();
            let same = mmd_value(&to_tensor(&near), &to_tensor(&near2), &spec).unwrap();
            let diff = mmd_value(&to_tensor(&near), &to_tensor(&far), &spec).unwrap();
            assert!(diff > same, "seed {seed}: {diff} <= {same}");
        }
    }

    #[test]
    fn mmd_dim_mismatch_and_empty_are_errors() {
        let x = Tensor::from_rows(&[vec![0.0f64, 1.0]]).unwrap();
        let y = Tensor::from_rows(&[vec![0.0f64]]).unwrap();
        assert!(mmd_value(&x, &y, &KernelSpec::default()).is_err());
    }

    fn flat_params(values: &[f64]) -> ParameterSet<f64> {
        let mut set = ParameterSet::new();
        set.insert(
            "h.w",
            Role::Head,
            Tensor::from_vec(vec![values.len()], values.to_vec())
                .unwrap()
                .with_requires_grad(true),
        )
        .unwrap();
        set
    }

    #[test]
    fn proximal_zero_at_reference_and_hand_value() {
        let local = flat_params(&[1.0, -2.0]);
        assert_eq!(proximal_penalty_value(&local, &local, 3.0).unwrap(), 0.0);

        let reference = flat_params(&[0.0, -3.0]);
        // mu=2, diff=(1,1): (2/2)*(1+1) = 2
        let v = proximal_penalty_value(&local, &reference, 2.0).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn proximal_gradient_is_mu_times_displacement() {
        let local = flat_params(&[1.5, -0.5]);
        let reference = flat_params(&[1.0, 0.5]);
        let mu = 0.7;
        let mut g: Graph<f64> = Graph::new();
        let (loss, bindings) = proximal_penalty_var(&mut g, &local, &reference, mu).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(bindings[0].var).unwrap();
        assert!((grad[0] - mu * 0.5).abs() < 1e-12);
        assert!((grad[1] - mu * (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn proximal_requires_compatible_sets() {
        let local = flat_params(&[1.0]);
        let reference = flat_params(&[1.0, 2.0]);
        assert!(proximal_penalty_value(&local, &reference, 1.0).is_err());
    }
}
