//! Variational contrastive log-ratio upper bound (vCLUB) on `I(Z_C; Z_S)`.
//!
//! A diagonal Gaussian `q(z_c | z_s)` is fitted by maximum likelihood on
//! paired latents; the bound contrasts the log-density of matched pairs with
//! the average log-density over all `N x N` pairings in the batch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{gauss_log_density, Bound, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Adam, Linear, ParamSet};
use crate::tensor::Tensor;

pub const LOGVAR_MIN: f64 = -8.0;
pub const LOGVAR_MAX: f64 = 8.0;

/// `q(z_c | z_s) = N(mu(z_s), diag(exp(logvar(z_s))))` with an MLP trunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianCondModel {
    pub dim: usize,
    pub hidden: usize,
    pub params: ParamSet,
    pub optimizer: Adam,
}

impl GaussianCondModel {
    pub fn new(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for l in Self::layers(dim, hidden) {
            l.init(&mut params, &mut rng);
        }
        GaussianCondModel {
            dim,
            hidden,
            params,
            optimizer: Adam::new(0.0),
        }
    }

    fn layers(dim: usize, hidden: usize) -> [Linear; 3] {
        [
            Linear::new("q.trunk", dim, hidden),
            Linear::new("q.mu", hidden, dim),
            Linear::new("q.logvar", hidden, dim),
        ]
    }

    /// Records `(mu, logvar)` for a `[N, D]` block of `z_s` rows.
    pub fn forward(&self, g: &mut Graph, p: &Bound, zs: Var) -> (Var, Var) {
        let [trunk, mu, lv] = Self::layers(self.dim, self.hidden);
        let h = trunk.forward(g, p, zs);
        let h = g.relu(h);
        let m = mu.forward(g, p, h);
        let l = lv.forward(g, p, h);
        let l = g.clamp(l, LOGVAR_MIN, LOGVAR_MAX);
        (m, l)
    }

    /// Evaluation of `(mu, logvar)` rows for `z_s [N, D]`.
    pub fn predict(&self, zs: &Tensor) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let x = g.constant(zs.clone());
        let (m, l) = self.forward(&mut g, &p, x);
        (g.value(m).clone(), g.value(l).clone())
    }
}

fn check_pairs(zc: &Tensor, zs: &Tensor, dim: usize) -> Result<()> {
    if zc.rows() == 0 {
        return Err(Error::Contract("CLUB needs at least one latent pair".into()));
    }
    if zc.shape() != zs.shape() || zc.cols() != dim {
        return Err(Error::Contract(format!(
            "paired latents must both be [N, {dim}], got {:?} and {:?}",
            zc.shape(),
            zs.shape()
        )));
    }
    Ok(())
}

/// `log q(z_c | z_s)` for one pair.
pub fn log_q(z_c: &[f64], z_s: &[f64], model: &GaussianCondModel) -> Result<f64> {
    if z_c.len() != model.dim || z_s.len() != model.dim {
        return Err(Error::Contract(format!(
            "log_q expects {}-vectors, got {} and {}",
            model.dim,
            z_c.len(),
            z_s.len()
        )));
    }
    if !model.params.all_finite() {
        return Err(Error::numeric("log_q", "non-finite q parameters"));
    }
    let (mu, lv) = model.predict(&Tensor::new(vec![1, model.dim], z_s.to_vec()));
    let v = gauss_log_density(z_c, mu.data(), lv.data());
    if !v.is_finite() {
        return Err(Error::numeric("log_q", format!("log-density evaluated to {v}")));
    }
    Ok(v)
}

/// Records the batch penalty on the tape. `q` enters as constants, so
/// gradients reach only `zc` and `zs`.
pub fn club_penalty_var(g: &mut Graph, model: &GaussianCondModel, zc: Var, zs: Var) -> Var {
    let qp = g.bind(&model.params, false);
    let (mu, lv) = model.forward(g, &qp, zs);
    let l = g.gauss_pair_log_density(zc, mu, lv);
    g.club_contrast(l)
}

/// `(1/N) sum_i [log q(zc_i|zs_i) - (1/N) sum_j log q(zc_j|zs_i)]`.
pub fn club_penalty(zc: &Tensor, zs: &Tensor, model: &GaussianCondModel) -> Result<f64> {
    check_pairs(zc, zs, model.dim)?;
    let mut g = Graph::new();
    let a = g.constant(zc.clone());
    let b = g.constant(zs.clone());
    let p = club_penalty_var(&mut g, model, a, b);
    let v = g.value(p).item();
    if !v.is_finite() {
        return Err(Error::numeric("club_penalty", format!("penalty evaluated to {v}")));
    }
    Ok(v)
}

/// One Adam ascent step on the paired log-likelihood with the latents held
/// fixed. Returns the negative log-likelihood before the update.
pub fn fit_q_step(zc: &Tensor, zs: &Tensor, model: &mut GaussianCondModel, lr: f64) -> Result<f64> {
    check_pairs(zc, zs, model.dim)?;
    let mut g = Graph::new();
    let p = g.bind(&model.params, true);
    let a = g.constant(zc.clone());
    let b = g.constant(zs.clone());
    let (mu, lv) = model.forward(&mut g, &p, b);
    let ll = g.gauss_row_log_density(a, mu, lv);
    let mean_ll = g.mean_all(ll);
    let nll = g.scale(mean_ll, -1.0);
    let value = g.value(nll).item();
    if !value.is_finite() {
        return Err(Error::numeric("q_nll", format!("negative log-likelihood is {value}")));
    }
    g.backward(nll);
    let grads = g.grads_of(&p);
    model.optimizer.step(&mut model.params, &grads, lr);
    Ok(value)
}

/// Fits `q` for `steps` minibatch steps drawn without replacement per pass.
pub fn fit_q(
    zc: &Tensor,
    zs: &Tensor,
    model: &mut GaussianCondModel,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    check_pairs(zc, zs, model.dim)?;
    let n = zc.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let take = batch.min(n);
        if cursor + take > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + take];
        cursor += take;
        trace.push(fit_q_step(&zc.select_rows(idx), &zs.select_rows(idx), model, lr)?);
    }
    Ok(trace)
}

/// Bound over a full evaluation set; with `batch = Some(b)` the set is
/// split into consecutive blocks of `b` rows and the block values averaged
/// with weights proportional to block size.
pub fn estimate_bound(zc: &Tensor, zs: &Tensor, model: &GaussianCondModel, batch: Option<usize>) -> Result<f64> {
    check_pairs(zc, zs, model.dim)?;
    let n = zc.rows();
    let b = batch.unwrap_or(n).clamp(1, n);
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + b).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let v = club_penalty(&zc.select_rows(&idx), &zs.select_rows(&idx), model)?;
        total += v * (end - start) as f64;
        start = end;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    /// Model with `mu(z) = z` and `logvar = 0` on D = 1 (hidden = 1 relu path
    /// cannot carry negative values, so this uses a two-unit trunk).
    fn identity_model() -> GaussianCondModel {
        let mut m = GaussianCondModel::new(1, 2, 0);
        m.params.insert("q.trunk.weight", Tensor::new(vec![1, 2], vec![1.0, -1.0]));
        m.params.insert("q.trunk.bias", Tensor::new(vec![2], vec![0.0, 0.0]));
        m.params.insert("q.mu.weight", Tensor::new(vec![2, 1], vec![1.0, -1.0]));
        m.params.insert("q.mu.bias", Tensor::new(vec![1], vec![0.0]));
        m.params.insert("q.logvar.weight", Tensor::new(vec![2, 1], vec![0.0, 0.0]));
        m.params.insert("q.logvar.bias", Tensor::new(vec![1], vec![0.0]));
        m
    }

    fn constant_model(dim: usize) -> GaussianCondModel {
        let mut m = GaussianCondModel::new(dim, 4, 1);
        m.params.insert("q.trunk.weight", Tensor::zeros(&[dim, 4]));
        m
    }

    fn sample_gaussian_pairs(n: usize, rho: f64, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut zc = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        for _ in 0..n {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            zs.push(a);
            zc.push(rho * a + (1.0 - rho * rho).sqrt() * b);
        }
        (Tensor::new(vec![n, 1], zc), Tensor::new(vec![n, 1], zs))
    }

    #[test]
    fn standard_normal_log_density() {
        let v = log_q(&[0.0], &[0.0], &identity_model()).unwrap();
        assert!((v - (-0.918_938_533_204_672_7)).abs() < 1e-12, "{v}");
    }

    #[test]
    fn mode_of_the_conditional_is_maximal() {
        let m = identity_model();
        let at_mode = log_q(&[0.7], &[0.7], &m).unwrap();
        for off in [-0.5, -0.01, 0.01, 0.3] {
            assert!(log_q(&[0.7 + off], &[0.7], &m).unwrap() < at_mode);
        }
    }

    #[test]
    fn diagonal_factorization() {
        let m2 = constant_model(2);
        let (mu, lv) = m2.predict(&Tensor::zeros(&[1, 2]));
        let joint = log_q(&[0.3, -1.2], &[5.0, 5.0], &m2).unwrap();
        let per_dim: f64 = (0..2)
            .map(|d| gauss_log_density(&[[0.3, -1.2][d]], &[mu.data()[d]], &[lv.data()[d]]))
            .sum();
        assert!((joint - per_dim).abs() < 1e-12);
    }

    #[test]
    fn single_pair_penalty_is_zero() {
        let m = GaussianCondModel::new(3, 8, 2);
        let zc = Tensor::new(vec![1, 3], vec![0.1, 2.0, -1.0]);
        let zs = Tensor::new(vec![1, 3], vec![1.0, 0.5, 0.0]);
        assert_eq!(club_penalty(&zc, &zs, &m).unwrap(), 0.0);
    }

    #[test]
    fn condition_independent_q_gives_exact_zero() {
        let m = constant_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zc = Tensor::new(vec![7, 3], (0..21).map(|_| rng.random_range(-2.0..2.0)).collect());
        let zs = Tensor::new(vec![7, 3], (0..21).map(|_| rng.random_range(-2.0..2.0)).collect());
        assert_eq!(club_penalty(&zc, &zs, &m).unwrap(), 0.0);
    }

    #[test]
    fn two_by_two_enumeration() {
        // Independent enumeration: log N(x; mu, 1) = -0.5 ln 2pi - (x-mu)^2/2.
        let ln = |x: f64, mu: f64| -0.5 * (2.0 * std::f64::consts::PI).ln() - (x - mu).powi(2) / 2.0;
        let pairs = [(1.0, 1.0), (-1.0, -1.0)];
        let mut want = 0.0;
        for (zci, zsi) in pairs {
            let neg: f64 = pairs.iter().map(|(zcj, _)| ln(*zcj, zsi)).sum::<f64>() / 2.0;
            want += ln(zci, zsi) - neg;
        }
        want /= 2.0;
        let zc = Tensor::new(vec![2, 1], vec![1.0, -1.0]);
        let zs = Tensor::new(vec![2, 1], vec![1.0, -1.0]);
        let got = club_penalty(&zc, &zs, &identity_model()).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!((got - 1.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_invariant_to_joint_row_permutation() {
        let m = GaussianCondModel::new(2, 6, 9);
        let (zc, zs) = {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let v: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            (Tensor::new(vec![5, 2], v), Tensor::new(vec![5, 2], w))
        };
        let perm = [3, 0, 4, 1, 2];
        let a = club_penalty(&zc, &zs, &m).unwrap();
        let b = club_penalty(&zc.select_rows(&perm), &zs.select_rows(&perm), &m).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_contract_violation() {
        let m = GaussianCondModel::new(2, 4, 0);
        let e = Tensor::zeros(&[0, 2]);
        assert!(matches!(club_penalty(&e, &e, &m), Err(Error::Contract(_))));
        assert!(matches!(estimate_bound(&e, &e, &m, None), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_parameters_surface_as_numeric_error() {
        let mut m = GaussianCondModel::new(1, 2, 0);
        m.params.insert("q.mu.bias", Tensor::new(vec![1], vec![f64::NAN]));
        assert!(matches!(log_q(&[0.0], &[0.0], &m), Err(Error::Numeric { .. })));
    }

    #[test]
    fn zero_learning_rate_leaves_q_unchanged() {
        let (zc, zs) = sample_gaussian_pairs(32, 0.5, 3);
        let mut m = GaussianCondModel::new(1, 16, 0);
        let before = m.params.clone();
        fit_q_step(&zc, &zs, &mut m, 0.0).unwrap();
        assert_eq!(m.params, before);
    }

    #[test]
    fn nll_decreases_on_linear_gaussian_data() {
        // z_c = 0.8 z_s + eps
        let (zc, zs) = sample_gaussian_pairs(2000, 0.8, 5);
        let mut m = GaussianCondModel::new(1, 16, 0);
        let trace = fit_q(&zc, &zs, &mut m, 100, 128, 1e-2, 6).unwrap();
        let upticks = trace.windows(2).filter(|w| w[1] > w[0]).count();
        // smoothed trend: mean of last 10 well below mean of first 10
        let head: f64 = trace[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = trace[90..].iter().sum::<f64>() / 10.0;
        assert!(tail < head - 0.1, "head {head} tail {tail}");
        // minibatch noise allows occasional upticks; most steps must descend
        assert!(upticks as f64 <= 0.45 * trace.len() as f64, "{upticks} upticks");
    }

    #[test]
    fn independent_latents_give_flat_mean() {
        let (zc, zs) = sample_gaussian_pairs(4000, 0.0, 8);
        let mut m = GaussianCondModel::new(1, 16, 0);
        fit_q(&zc, &zs, &mut m, 1500, 256, 5e-3, 9).unwrap();
        let (mu, _) = m.predict(&zs);
        let mean = mu.data().iter().sum::<f64>() / mu.len() as f64;
        let var_mu = mu.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / mu.len() as f64;
        let zm = zc.data().iter().sum::<f64>() / zc.len() as f64;
        let var_zc = zc.data().iter().map(|v| (v - zm).powi(2)).sum::<f64>() / zc.len() as f64;
        assert!(var_mu < 0.1 * var_zc, "var mu {var_mu} vs var zc {var_zc}");
        assert!(estimate_bound(&zc, &zs, &m, None).unwrap() <= 0.05);
    }

    #[test]
    fn converged_bound_tracks_the_analytic_club_value() {
        // With q equal to the true conditional the bound is rho^2 / (1 - rho^2).
        let (zc, zs) = sample_gaussian_pairs(4000, 0.71, 12);
        let mut m = GaussianCondModel::new(1, 16, 0);
        fit_q(&zc, &zs, &mut m, 2000, 256, 5e-3, 13).unwrap();
        let est = estimate_bound(&zc, &zs, &m, None).unwrap();
        let club = 0.71f64.powi(2) / (1.0 - 0.71f64.powi(2));
        assert!((est - club).abs() < 0.15, "estimate {est} vs analytic {club}");
    }

    #[test]
    fn batched_estimate_is_weighted_average() {
        let (zc, zs) = sample_gaussian_pairs(10, 0.5, 1);
        let m = identity_model();
        let full = estimate_bound(&zc, &zs, &m, Some(10)).unwrap();
        assert!((full - club_penalty(&zc, &zs, &m).unwrap()).abs() < 1e-15);
        let b = estimate_bound(&zc, &zs, &m, Some(4)).unwrap();
        let parts = [(0..4), (4..8), (8..10)];
        let want: f64 = parts
            .into_iter()
            .map(|r| {
                let idx: Vec<usize> = r.collect();
                club_penalty(&zc.select_rows(&idx), &zs.select_rows(&idx), &m).unwrap() * idx.len() as f64
            })
            .sum::<f64>()
            / 10.0;
        assert!((b - want).abs() < 1e-12);
    }
}
