//! Reconstruction, entropy and replacement-consistency losses and their weighted total.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower clamp inside the entropy logarithm.
pub const LOG_EPS: f64 = 1e-8;

/// Mean squared difference over all elements.
pub fn recon_loss<T: Scalar>(g: &mut Graph<T>, target: Var, recon: Var) -> Result<Var> {
    if g.shape(target) != g.shape(recon) {
        return Err(Error::validation(format!("recon_loss: {:?} vs {:?}", g.shape(target), g.shape(recon))));
    }
    let d = g.sub(recon, target);
    let sq = g.square(d);
    Ok(g.mean_all(sq))
}

/// `-(1/|Ω|) Σ_k Σ_p α ln α` for `alpha: [B, K, H, W]`, averaged over the batch.
pub fn entropy_loss<T: Scalar>(g: &mut Graph<T>, alpha: Var) -> Result<Var> {
    let shape = g.shape(alpha).to_vec();
    let [b, _, h, w]: [usize; 4] = shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::validation(format!("entropy_loss: alpha {shape:?} is not [B, K, H, W]")))?;
    if g.value(alpha).data().iter().any(|v| !(v.as_f64() >= -1e-6 && v.as_f64() <= 1.0 + 1e-6)) {
        return Err(Error::validation("entropy_loss: alpha outside [0, 1]"));
    }
    let l = g.log_clamp(alpha, T::cast(LOG_EPS));
    let p = g.mul(alpha, l);
    let s = g.sum_all(p);
    Ok(g.scale(s, T::cast(-1.0 / (b * h * w) as f64)))
}

/// Minimum-cost one-to-one assignment for a square `k x k` row-major cost matrix.
/// Returns `sigma` with row `i` matched to column `sigma[i]`. Ties keep the first
/// permutation in lexicographic order for `k <= 2`.
pub fn assignment(cost: &[f64], k: usize) -> Vec<usize> {
    assert_eq!(cost.len(), k * k, "cost matrix must be k x k");
    if k <= 2 {
        let perms: &[&[usize]] = if k == 2 {
            &[&[0, 1], &[1, 0]]
        } else if k == 1 {
            &[&[0]]
        } else {
            &[&[]]
        };
        let score = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[i * k + j]).sum::<f64>();
        let mut best = perms[0];
        for p in &perms[1..] {
            if score(p) < score(best) {
                best = p;
            }
        }
        return best.to_vec();
    }
    hungarian(cost, k)
}

/// Shortest augmenting path Hungarian algorithm, O(k^3).
fn hungarian(cost: &[f64], k: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    // 1-based potentials with a virtual column 0.
    let (mut u, mut v) = (vec![0.0; k + 1], vec![0.0; k + 1]);
    let mut owner = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=k {
                if !used[j] {
                    let cur = cost[(i0 - 1) * k + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut sigma = vec![0; k];
    for j in 1..=k {
        sigma[owner[j] - 1] = j - 1;
    }
    sigma
}

/// Pairwise mask distances `h[b, i, j] = mean_p |α_i(p) - α'_j(p)|` as a graph node `[B, K, K]`.
fn pair_costs<T: Scalar>(g: &mut Graph<T>, alpha: Var, other: Var) -> Result<(Var, [usize; 4])> {
    let (sa, sb) = (g.shape(alpha).to_vec(), g.shape(other).to_vec());
    if sa != sb {
        return Err(Error::validation(format!("consistency_loss: {sa:?} vs {sb:?}")));
    }
    let dims: [usize; 4] = sa
        .as_slice()
        .try_into()
        .map_err(|_| Error::validation(format!("consistency_loss: {sa:?} is not [B, K, H, W]")))?;
    let [b, k, h, w] = dims;
    let p = h * w;
    let a = g.reshape(alpha, &[b, k, 1, p]);
    let a = g.broadcast_to(a, &[b, k, k, p]);
    let o = g.reshape(other, &[b, 1, k, p]);
    let o = g.broadcast_to(o, &[b, k, k, p]);
    let d = g.sub(a, o);
    let ad = g.abs(d);
    let s = g.sum_axis(ad, 3);
    let s = g.reshape(s, &[b, k, k]);
    Ok((g.scale(s, T::cast(1.0 / p as f64)), dims))
}

/// Matched-pair consistency between masks of a crop and of its background-replaced twin,
/// averaged over slots and batch. Only the minimizing assignment carries gradient.
pub fn consistency_loss<T: Scalar>(g: &mut Graph<T>, alpha: Var, other: Var) -> Result<Var> {
    let (costs, [b, k, _, _]) = pair_costs(g, alpha, other)?;
    let cv = g.value(costs).to_f64_vec();
    let mut mask = vec![T::zero(); b * k * k];
    for bi in 0..b {
        let sigma = assignment(&cv[bi * k * k..(bi + 1) * k * k], k);
        for (i, &j) in sigma.iter().enumerate() {
            mask[bi * k * k + i * k + j] = T::one();
        }
    }
    let m = g.constant(Tensor::from_vec(&[b, k, k], mask));
    let picked = g.mul(costs, m);
    // Reduce rows first so that the matched pair of each sample is added on its own; this keeps
    // the value exactly invariant to slot permutations and argument order for K = 2.
    let rows = g.sum_axis(picked, 2);
    let per_sample = g.sum_axis(rows, 1);
    let s = g.sum_all(per_sample);
    Ok(g.scale(s, T::cast(1.0 / (b * k) as f64)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub recon: f64,
    pub entr: f64,
    pub rep: f64,
}

/// Component losses, their weights and the weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub recon: f64,
    pub entr: f64,
    pub rep: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// `λ1 recon + λ2 entr + λ3 rep`.
pub fn total_loss(recon: f64, entr: f64, rep: f64, weights: LossWeights) -> LossBundle {
    let total = weights.recon * recon + weights.entr * entr + weights.rep * rep;
    LossBundle { recon, entr, rep, total, weights }
}

/// Graph form of [`total_loss`]; a missing consistency term contributes nothing.
pub fn weighted_total<T: Scalar>(
    g: &mut Graph<T>,
    recon: Var,
    entr: Var,
    rep: Option<Var>,
    weights: LossWeights,
) -> Var {
    let r = g.scale(recon, T::cast(weights.recon));
    let e = g.scale(entr, T::cast(weights.entr));
    let mut t = g.add(r, e);
    if let Some(rep) = rep {
        let c = g.scale(rep, T::cast(weights.rep));
        t = g.add(t, c);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval(f: impl FnOnce(&mut Graph<f64>) -> Result<Var>) -> Result<f64> {
        let mut g = Graph::new();
        let v = f(&mut g)?;
        Ok(g.value(v).item())
    }

    fn recon(a: f64, b: f64) -> f64 {
        eval(|g| {
            let (x, y) = (g.constant(Tensor::full(&[1, 3, 4, 4], a)), g.constant(Tensor::full(&[1, 3, 4, 4], b)));
            recon_loss(g, x, y)
        })
        .unwrap()
    }

    #[test]
    fn recon_cases() {
        assert_eq!(recon(0.3, 0.3), 0.0);
        assert_eq!(recon(0.0, 1.0), 1.0);
        assert!((recon(0.2, 0.5) - 0.3f64 * 0.3).abs() < 1e-12);
        let err = eval(|g| {
            let (x, y) = (g.constant(Tensor::zeros(&[1, 3, 4, 4])), g.constant(Tensor::zeros(&[1, 3, 4, 5])));
            recon_loss(g, x, y)
        });
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    fn two_slot(p: f64) -> Tensor<f64> {
        Tensor::from_fn(&[1, 2, 3, 3], |i| if i < 9 { p } else { 1.0 - p })
    }

    fn entropy(t: &Tensor<f64>) -> Result<f64> {
        eval(|g| {
            let a = g.constant(t.clone());
            entropy_loss(g, a)
        })
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(entropy(&two_slot(1.0)).unwrap(), 0.0);
        assert!((entropy(&two_slot(0.5)).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let expect = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((entropy(&two_slot(0.9)).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.3251).abs() < 1e-4);
        assert!(matches!(entropy(&two_slot(1.1)), Err(Error::Validation(_))));
    }

    fn consistency(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        eval(|g| {
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            consistency_loss(g, x, y)
        })
        .unwrap()
    }

    fn swap(t: &Tensor<f64>) -> Tensor<f64> {
        Tensor::concat(&[&t.narrow(1, 1, 1), &t.narrow(1, 0, 1)], 1)
    }

    fn random_alpha(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::autograd::softmax(&Tensor::uniform(shape, -3.0, 3.0, &mut rng), 1)
    }

    #[test]
    fn consistency_cases() {
        let a = random_alpha(1, &[2, 2, 4, 4]);
        assert_eq!(consistency(&a, &a), 0.0);
        assert_eq!(consistency(&a, &swap(&a)), 0.0);
        let (x, y) = (two_slot(1.0), two_slot(0.8));
        // Identity: (|1-0.8| + |0-0.2|) / 2; swap: (|1-0.2| + |0-0.8|) / 2.
        let id = (0.2f64 + 0.2) / 2.0;
        let sw = (0.8f64 + 0.8) / 2.0;
        assert!((consistency(&x, &y) - id.min(sw)).abs() < 1e-12);
    }

    #[test]
    fn consistency_rejects_mismatch() {
        let r = eval(|g| {
            let (x, y) = (g.constant(Tensor::zeros(&[1, 2, 4, 4])), g.constant(Tensor::zeros(&[1, 2, 4, 3])));
            consistency_loss(g, x, y)
        });
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn total_cases() {
        let w = LossWeights { recon: 100.0, entr: 0.01, rep: 0.01 };
        let b = total_loss(0.01, 0.6931, 0.2, w);
        assert!((b.total - (100.0 * 0.01 + 0.01 * 0.6931 + 0.01 * 0.2)).abs() < 1e-12);
        assert!((b.total - 1.008931).abs() < 1e-9);
        assert_eq!(total_loss(0.0, 0.0, 0.0, w).total, 0.0);
        let d = total_loss(0.01, 0.6931, 0.2, LossWeights { rep: 0.02, ..w });
        assert!((d.total - b.total - 0.01 * 0.2).abs() < 1e-12);
    }

    #[test]
    fn graph_total_matches_numeric() {
        let w = LossWeights { recon: 100.0, entr: 0.05, rep: 0.25 };
        let mut g = Graph::<f64>::new();
        let (r, e, c) =
            (g.constant(Tensor::scalar(0.01)), g.constant(Tensor::scalar(0.6)), g.constant(Tensor::scalar(0.2)));
        let t = weighted_total(&mut g, r, e, Some(c), w);
        assert!((g.value(t).item() - total_loss(0.01, 0.6, 0.2, w).total).abs() < 1e-12);
        let t2 = weighted_total(&mut g, r, e, None, w);
        assert!((g.value(t2).item() - total_loss(0.01, 0.6, 0.0, w).total).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::<f64>::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng);
        let rec = Tensor::<f64>::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng);
        let err = gradcheck::check(&[img, rec], |g, v| recon_loss(g, v[0], v[1]).unwrap(), 1e-5);
        assert!(err < 1e-6, "recon {err}");

        let logits = Tensor::<f64>::uniform(&[1, 2, 8, 8], -2.0, 2.0, &mut rng);
        let err = gradcheck::check(
            std::slice::from_ref(&logits),
            |g, v| {
                let a = g.softmax(v[0], 1);
                entropy_loss(g, a).unwrap()
            },
            1e-5,
        );
        assert!(err < 1e-6, "entropy {err}");

        let other = Tensor::<f64>::uniform(&[1, 2, 8, 8], -2.0, 2.0, &mut rng);
        let err = gradcheck::check(
            &[logits, other],
            |g, v| {
                let a = g.softmax(v[0], 1);
                let b = g.softmax(v[1], 1);
                consistency_loss(g, a, b).unwrap()
            },
            1e-5,
        );
        assert!(err < 1e-4, "consistency {err}");
    }

    fn brute_force(cost: &[f64], k: usize) -> f64 {
        fn rec(cost: &[f64], k: usize, i: usize, used: &mut Vec<bool>) -> f64 {
            if i == k {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..k {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[i * k + j] + rec(cost, k, i + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(cost, k, 0, &mut vec![false; k])
    }

    proptest! {
        #[test]
        fn hungarian_is_optimal(k in 3usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost: Vec<f64> = Tensor::<f64>::uniform(&[k * k], 0.0, 1.0, &mut rng).into_data();
            let sigma = assignment(&cost, k);
            let mut seen = vec![false; k];
            for &j in &sigma { prop_assert!(!seen[j]); seen[j] = true; }
            let got: f64 = sigma.iter().enumerate().map(|(i, &j)| cost[i * k + j]).sum();
            prop_assert!((got - brute_force(&cost, k)).abs() < 1e-12);
        }

        #[test]
        fn consistency_is_symmetric_and_permutation_invariant(seed in any::<u64>()) {
            let a = random_alpha(seed, &[2, 2, 4, 6]);
            let b = random_alpha(seed ^ 0x5555, &[2, 2, 4, 6]);
            let l = consistency(&a, &b);
            prop_assert_eq!(l, consistency(&b, &a));
            prop_assert_eq!(l, consistency(&a, &swap(&b)));
        }

        #[test]
        fn entropy_is_bounded(seed in any::<u64>(), k in 2usize..5) {
            let a = random_alpha(seed, &[1, k, 4, 4]);
            let e = entropy(&a).unwrap();
            prop_assert!(e >= 0.0 && e <= (k as f64).ln() + 1e-12);
        }

        #[test]
        fn recon_is_bounded(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::<f64>::uniform(&[1, 3, 4, 4], 0.0, 1.0, &mut rng);
            let b = Tensor::<f64>::uniform(&[1, 3, 4, 4], 0.0, 1.0, &mut rng);
            let r = eval(|g| { let (x, y) = (g.constant(a), g.constant(b)); recon_loss(g, x, y) }).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }
}
