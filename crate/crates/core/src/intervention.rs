//! Backdoor-adjusted prediction: average the fused prediction over every
//! spurious context instead of the one observed in the image.

use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, Bound, Graph, Var};
use crate::error::{Error, Result};
use crate::model::FusionNet;
use crate::prototypes::{causal_class_probs, CausalLibrary, DistanceKind, SpuriousLibrary};
use crate::tensor::Tensor;

/// How per-context predictions are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Weighted mean of per-context probabilities.
    #[default]
    Arithmetic,
    /// Softmax of the weighted mean of per-context logits.
    Geometric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterventionOutput {
    pub probs: Vec<f64>,
    /// Softmax of the fused logits for each context, in library order.
    pub per_context: Vec<Vec<f64>>,
}

/// Uniform `1/M` weights, or the given ones after validation.
pub fn context_weights(m: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0 / m as f64; m]),
        Some(w) => {
            if w.len() != m {
                return Err(Error::Contract(format!("{} context weights for {m} contexts", w.len())));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Contract("context weights must be finite and non-negative".into()));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("context weights sum to {total}, not 1")));
            }
            Ok(w.to_vec())
        }
    }
}

fn check_dims(z_c: &[f64], lib: &SpuriousLibrary, fusion: &FusionNet) -> Result<()> {
    if lib.is_empty() {
        return Err(Error::Contract("intervention needs at least one spurious prototype".into()));
    }
    if z_c.len() != fusion.latent_dim || lib.prototypes.cols() != fusion.latent_dim {
        return Err(Error::Contract(format!(
            "fusion expects {}-dim latents, got z_c {} and prototypes {}",
            fusion.latent_dim,
            z_c.len(),
            lib.prototypes.cols()
        )));
    }
    Ok(())
}

/// `P(y | do(z_c)) = sum_m w_m softmax(F(z_c, p_m))`.
pub fn intervene(
    z_c: &[f64],
    lib: &SpuriousLibrary,
    fusion: &FusionNet,
    weights: Option<&[f64]>,
    mode: ContextMode,
) -> Result<InterventionOutput> {
    check_dims(z_c, lib, fusion)?;
    let w = context_weights(lib.len(), weights)?;
    let mut g = Graph::new();
    let p = g.bind(&fusion.params, false);
    let zc = g.constant(Tensor::row_vector(z_c));
    let ps = g.constant(lib.prototypes.clone());
    let pairs = g.pair_concat(zc, ps);
    let logits = fusion.forward(&mut g, &p, pairs);
    let soft = g.softmax_rows(logits);
    let per_context: Vec<Vec<f64>> = (0..lib.len()).map(|m| g.value(soft).row(m).to_vec()).collect();
    let combined = match mode {
        ContextMode::Arithmetic => g.group_weighted_sum(soft, w),
        ContextMode::Geometric => {
            let mixed = g.group_weighted_sum(logits, w);
            g.softmax_rows(mixed)
        }
    };
    let probs = g.value(combined).data().to_vec();
    if probs.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("intervention", "non-finite class probabilities"));
    }
    Ok(InterventionOutput { probs, per_context })
}

/// Prediction without intervention: the causal prototype classifier alone.
pub fn conditional_predict(z_c: &[f64], lib: &CausalLibrary, kind: DistanceKind) -> Result<Vec<f64>> {
    causal_class_probs(z_c, lib, kind)
}

/// Fused prediction `softmax(F(z_c, z_s))` for one observed context.
pub fn observational_predict(z_c: &[f64], z_s: &[f64], fusion: &FusionNet) -> Result<Vec<f64>> {
    let mut logits = fusion.fuse_logits(z_c, z_s)?;
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// Records intervened class log-probabilities `[B, C]` for a batch of
/// causal latents against every context row of `ps`.
pub fn intervened_log_probs_var(
    g: &mut Graph,
    fusion: &FusionNet,
    p: &Bound,
    zc: Var,
    ps: Var,
    weights: Vec<f64>,
    mode: ContextMode,
) -> Var {
    let pairs = g.pair_concat(zc, ps);
    let logits = fusion.forward(g, p, pairs);
    match mode {
        ContextMode::Arithmetic => {
            let soft = g.softmax_rows(logits);
            let mixed = g.group_weighted_sum(soft, weights);
            // keeps log finite if a mixed probability underflows to zero
            let guarded = g.add_scalar(mixed, 1e-300);
            g.log(guarded)
        }
        ContextMode::Geometric => {
            let mixed = g.group_weighted_sum(logits, weights);
            g.log_softmax_rows(mixed)
        }
    }
}

/// Intervened class probabilities `[B, C]` for a batch of causal latents.
pub fn intervene_batch(
    zc: &Tensor,
    lib: &SpuriousLibrary,
    fusion: &FusionNet,
    weights: Option<&[f64]>,
    mode: ContextMode,
) -> Result<Tensor> {
    if zc.rows() == 0 {
        return Ok(Tensor::zeros(&[0, fusion.num_classes]));
    }
    check_dims(zc.row(0), lib, fusion)?;
    let w = context_weights(lib.len(), weights)?;
    let mut g = Graph::new();
    let p = g.bind(&fusion.params, false);
    let z = g.constant(zc.clone());
    let ps = g.constant(lib.prototypes.clone());
    let lp = intervened_log_probs_var(&mut g, fusion, &p, z, ps, w, mode);
    let out = g.value(lp).map(f64::exp);
    if !out.all_finite() {
        return Err(Error::numeric("intervention", "non-finite class probabilities"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// D = 1; logits are `[p_s * ln 3, 0]` for `p_s >= 0`.
    fn hand_fusion() -> FusionNet {
        let mut f = FusionNet::new(1, 2, 2, 0);
        f.params.insert("fusion.l0.weight", Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 0.0]));
        f.params.insert("fusion.l0.bias", Tensor::zeros(&[2]));
        f.params.insert("fusion.l1.weight", Tensor::new(vec![2, 2], vec![3f64.ln(), 0.0, 0.0, 0.0]));
        f.params.insert("fusion.l1.bias", Tensor::zeros(&[2]));
        f
    }

    fn lib(rows: &[Vec<f64>]) -> SpuriousLibrary {
        SpuriousLibrary::new(Tensor::from_rows(rows)).unwrap()
    }

    #[test]
    fn two_context_hand_value() {
        let out = intervene(&[0.3], &lib(&[vec![1.0], vec![0.0]]), &hand_fusion(), None, ContextMode::Arithmetic)
            .unwrap();
        assert!((out.per_context[0][0] - 0.75).abs() < 1e-12);
        assert!((out.per_context[1][0] - 0.5).abs() < 1e-12);
        assert!((out.probs[0] - 0.625).abs() < 1e-12 && (out.probs[1] - 0.375).abs() < 1e-12);
    }

    #[test]
    fn geometric_mode_averages_logits() {
        let out = intervene(&[0.3], &lib(&[vec![1.0], vec![0.0]]), &hand_fusion(), None, ContextMode::Geometric)
            .unwrap();
        // mean logits [ln3 / 2, 0] -> p0 = sqrt3 / (sqrt3 + 1)
        let want = 3f64.sqrt() / (3f64.sqrt() + 1.0);
        assert!((out.probs[0] - want).abs() < 1e-12);
    }

    #[test]
    fn single_context_equals_conditional() {
        let f = FusionNet::new(3, 6, 4, 11);
        let zc = [0.2, -1.0, 0.7];
        let ps = vec![1.5, 0.1, -0.3];
        let out = intervene(&zc, &lib(std::slice::from_ref(&ps)), &f, None, ContextMode::Arithmetic).unwrap();
        let cond = observational_predict(&zc, &ps, &f).unwrap();
        for (a, b) in out.probs.iter().zip(&cond) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_path_is_the_prototype_classifier() {
        let lib = CausalLibrary::new(Tensor::from_rows(&[vec![0.0], vec![1.0]]), vec![0, 1], 2).unwrap();
        let p = conditional_predict(&[0.0], &lib, DistanceKind::Euclidean).unwrap();
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn context_independent_fusion_ignores_the_library() {
        let mut f = FusionNet::new(2, 4, 3, 9);
        // zero the rows of the first layer that read p_s
        let w = f.params.get_mut("fusion.l0.weight").unwrap();
        for r in 2..4 {
            w.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
        }
        let l = lib(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![-1.0, -1.0]]);
        let out = intervene(&[0.5, -0.5], &l, &f, None, ContextMode::Arithmetic).unwrap();
        let single = observational_predict(&[0.5, -0.5], &[9.0, 9.0], &f).unwrap();
        for (a, b) in out.probs.iter().zip(&single) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_weights_select_a_context() {
        let f = FusionNet::new(2, 5, 3, 4);
        let l = lib(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![-1.0, -1.0]]);
        let out = intervene(&[0.5, 0.5], &l, &f, Some(&[0.0, 1.0, 0.0]), ContextMode::Arithmetic).unwrap();
        for (a, b) in out.probs.iter().zip(&out.per_context[1]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let f = FusionNet::new(2, 5, 3, 4);
        let l = lib(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        assert!(intervene(&[0.5], &l, &f, None, ContextMode::Arithmetic).is_err());
        assert!(intervene(&[0.5, 0.5], &l, &f, Some(&[0.7, 0.7]), ContextMode::Arithmetic).is_err());
        assert!(intervene(&[0.5, 0.5], &l, &f, Some(&[1.0]), ContextMode::Arithmetic).is_err());
        let empty = SpuriousLibrary { prototypes: Tensor::zeros(&[0, 2]) };
        assert!(matches!(
            intervene(&[0.5, 0.5], &empty, &f, None, ContextMode::Arithmetic),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn batch_matches_single() {
        let f = FusionNet::new(3, 6, 4, 2);
        let l = lib(&[vec![0.0, 1.0, 2.0], vec![1.0, -1.0, 0.0], vec![0.3, 0.3, 0.3]]);
        let zc = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-0.5, 0.0, 0.5]]);
        let batch = intervene_batch(&zc, &l, &f, None, ContextMode::Arithmetic).unwrap();
        for i in 0..2 {
            let one = intervene(zc.row(i), &l, &f, None, ContextMode::Arithmetic).unwrap();
            for c in 0..4 {
                assert!((batch.at(i, c) - one.probs[c]).abs() < 1e-12);
            }
        }
    }

    fn random_setup(seed: u64) -> (FusionNet, Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = FusionNet::new(3, 8, 3, seed);
        let m = rng.random_range(1..7);
        let rows = (0..m).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let zc = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        (f, rows, zc)
    }

    proptest! {
        #[test]
        fn permuting_contexts_is_bitwise_invisible(seed in 0u64..300, rot in 0usize..7) {
            let (f, rows, zc) = random_setup(seed);
            let mut perm = rows.clone();
            let k = rot % perm.len();
            perm.rotate_left(k);
            perm.reverse();
            let a = intervene(&zc, &lib(&rows), &f, None, ContextMode::Arithmetic).unwrap();
            let b = intervene(&zc, &lib(&perm), &f, None, ContextMode::Arithmetic).unwrap();
            prop_assert_eq!(a.probs, b.probs);
        }

        #[test]
        fn duplicating_every_context_keeps_the_mixture(seed in 0u64..300) {
            let (f, rows, zc) = random_setup(seed);
            let doubled: Vec<Vec<f64>> = rows.iter().chain(&rows).cloned().collect();
            let a = intervene(&zc, &lib(&rows), &f, None, ContextMode::Arithmetic).unwrap();
            let b = intervene(&zc, &lib(&doubled), &f, None, ContextMode::Arithmetic).unwrap();
            for (x, y) in a.probs.iter().zip(&b.probs) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn mixture_lies_between_context_extremes(seed in 0u64..300) {
            let (f, rows, zc) = random_setup(seed);
            let out = intervene(&zc, &lib(&rows), &f, None, ContextMode::Arithmetic).unwrap();
            prop_assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..out.probs.len() {
                let lo = out.per_context.iter().map(|p| p[c]).fold(f64::INFINITY, f64::min);
                let hi = out.per_context.iter().map(|p| p[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.probs[c] >= lo - 1e-12 && out.probs[c] <= hi + 1e-12);
            }
        }
    }
}
