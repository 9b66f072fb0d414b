//! Causal and spurious prototype libraries.
//!
//! The causal library assigns each prototype to a class and classifies by a
//! softmax over negated distances, summed within class. After projection
//! every causal prototype is a copy of a real training latent of its class,
//! which is what makes the explanations case-based. The spurious library is a
//! free dictionary of confounder contexts.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_sum_exp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    Euclidean,
    Squared,
}

/// How a requested prototype count `K` maps onto classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KMode {
    /// `K` prototypes for every class.
    #[default]
    PerClass,
    /// `K` prototypes in total, dealt round-robin over classes.
    Total,
}

/// Class index of every prototype for a library of the given layout.
pub fn class_layout(num_classes: usize, k: usize, mode: KMode) -> Result<Vec<usize>> {
    let total = match mode {
        KMode::PerClass => k * num_classes,
        KMode::Total => k,
    };
    if total < num_classes || num_classes == 0 {
        return Err(Error::Config(format!(
            "{total} causal prototypes cannot cover {num_classes} classes"
        )));
    }
    Ok(match mode {
        KMode::PerClass => (0..num_classes).flat_map(|c| std::iter::repeat_n(c, k)).collect(),
        KMode::Total => (0..total).map(|i| i % num_classes).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalLibrary {
    /// `[K_total, D]`.
    pub prototypes: Tensor,
    pub class_of: Vec<usize>,
    pub provenance: Vec<Option<String>>,
    pub num_classes: usize,
}

impl CausalLibrary {
    pub fn new(prototypes: Tensor, class_of: Vec<usize>, num_classes: usize) -> Result<Self> {
        if prototypes.rows() != class_of.len() {
            return Err(Error::Contract(format!(
                "{} prototypes but {} class assignments",
                prototypes.rows(),
                class_of.len()
            )));
        }
        for c in 0..num_classes {
            if !class_of.contains(&c) {
                return Err(Error::Contract(format!("class {c} has no causal prototype")));
            }
        }
        if let Some(bad) = class_of.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Contract(format!("prototype assigned to class {bad} >= {num_classes}")));
        }
        let k = class_of.len();
        Ok(CausalLibrary {
            prototypes,
            class_of,
            provenance: vec![None; k],
            num_classes,
        })
    }

    /// Initializes each prototype from the latent of a distinct random
    /// training sample of its class (with replacement when a class is small).
    pub fn init_from_latents(
        class_of: Vec<usize>,
        num_classes: usize,
        latents: &Tensor,
        labels: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(class_of.len());
        for c in 0..num_classes {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            if members.is_empty() {
                return Err(Error::Contract(format!("class {c} absent from initialization latents")));
            }
            let need = class_of.iter().filter(|&&k| k == c).count();
            let picks = if need <= members.len() {
                sample(&mut rng, members.len(), need).into_vec()
            } else {
                (0..need).map(|i| i % members.len()).collect()
            };
            rows.push(picks.into_iter().map(|p| members[p]).collect::<Vec<_>>());
        }
        let mut cursor = vec![0usize; num_classes];
        let mut data = Vec::with_capacity(class_of.len() * latents.cols());
        for &c in &class_of {
            data.extend_from_slice(latents.row(rows[c][cursor[c]]));
            cursor[c] += 1;
        }
        let protos = Tensor::new(vec![class_of.len(), latents.cols()], data);
        Self::new(protos, class_of, num_classes)
    }

    pub fn len(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn is_projected(&self) -> bool {
        !self.provenance.is_empty() && self.provenance.iter().all(Option::is_some)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpuriousLibrary {
    /// `[M, D]`.
    pub prototypes: Tensor,
}

impl SpuriousLibrary {
    pub fn new(prototypes: Tensor) -> Result<Self> {
        if prototypes.rows() == 0 {
            return Err(Error::Contract("spurious library needs M >= 1".into()));
        }
        if !prototypes.all_finite() {
            return Err(Error::numeric("spurious library", "non-finite prototype"));
        }
        Ok(SpuriousLibrary { prototypes })
    }

    /// Copies `m` distinct random rows of `latents` (all rows, cycled, when
    /// fewer than `m` exist).
    pub fn init_from_latents(m: usize, latents: &Tensor, seed: u64) -> Result<Self> {
        let n = latents.rows();
        if n == 0 || m == 0 {
            return Err(Error::Contract("spurious initialization needs latents and M >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx: Vec<usize> = if m <= n {
            sample(&mut rng, n, m).into_vec()
        } else {
            (0..m).map(|i| i % n).collect()
        };
        Self::new(latents.select_rows(&idx))
    }

    pub fn len(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.rows() == 0
    }
}

pub fn distance(a: &[f64], b: &[f64], kind: DistanceKind) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("distance between {}- and {}-vectors", a.len(), b.len())));
    }
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(match kind {
        DistanceKind::Euclidean => sq.sqrt(),
        DistanceKind::Squared => sq,
    })
}

/// Class log-scores `log sum_{k in K_y} exp(-d(z, p_k))` (unnormalized).
fn class_scores(z_c: &[f64], lib: &CausalLibrary, kind: DistanceKind) -> Result<Vec<f64>> {
    if z_c.len() != lib.dim() {
        return Err(Error::Contract(format!(
            "latent has {} dims, library {}",
            z_c.len(),
            lib.dim()
        )));
    }
    let neg: Vec<f64> = (0..lib.len())
        .map(|k| distance(z_c, lib.prototypes.row(k), kind).map(|d| -d))
        .collect::<Result<_>>()?;
    (0..lib.num_classes)
        .map(|c| {
            let members: Vec<f64> = (0..lib.len()).filter(|&k| lib.class_of[k] == c).map(|k| neg[k]).collect();
            if members.is_empty() {
                Err(Error::Contract(format!("class {c} has no causal prototype")))
            } else {
                Ok(log_sum_exp(&members))
            }
        })
        .collect()
}

/// `P(y | z_c)`: within-class sum of `exp(-d)`, normalized over classes.
pub fn causal_class_probs(z_c: &[f64], lib: &CausalLibrary, kind: DistanceKind) -> Result<Vec<f64>> {
    let mut s = class_scores(z_c, lib, kind)?;
    crate::autograd::softmax_in_place(&mut s);
    Ok(s)
}

/// Records class log-probabilities `[N, C]` for a batch of causal latents.
pub fn causal_log_probs_var(
    g: &mut Graph,
    zc: Var,
    protos: Var,
    class_of: &[usize],
    num_classes: usize,
    kind: DistanceKind,
) -> Var {
    let d2 = g.pair_sq_dist(zc, protos);
    let d = match kind {
        DistanceKind::Euclidean => g.sqrt(d2),
        DistanceKind::Squared => d2,
    };
    let neg = g.scale(d, -1.0);
    let scores = g.group_log_sum_exp(neg, class_of, num_classes);
    g.log_softmax_rows(scores)
}

/// Replaces every causal prototype by the nearest training latent of its own
/// class and records the source sample id. Ties keep the lowest index.
pub fn project_prototypes(
    lib: &CausalLibrary,
    latents: &Tensor,
    labels: &[usize],
    sample_ids: &[String],
) -> Result<CausalLibrary> {
    if latents.rows() != labels.len() || labels.len() != sample_ids.len() {
        return Err(Error::Contract("latents, labels and sample ids must align".into()));
    }
    if latents.cols() != lib.dim() {
        return Err(Error::Contract(format!(
            "latents have {} dims, library {}",
            latents.cols(),
            lib.dim()
        )));
    }
    let mut out = lib.clone();
    for k in 0..lib.len() {
        let c = lib.class_of[k];
        let p = lib.prototypes.row(k);
        let mut best: Option<(usize, f64)> = None;
        for (i, &y) in labels.iter().enumerate() {
            if y != c {
                continue;
            }
            let d = distance(latents.row(i), p, DistanceKind::Squared)?;
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.ok_or_else(|| Error::Contract(format!("class {c} absent from projection latents")))?;
        out.prototypes.row_mut(k).copy_from_slice(latents.row(i));
        out.provenance[k] = Some(sample_ids[i].clone());
    }
    Ok(out)
}

/// Records `mean_i min_m d^2(z_s_i, p_m) - tau * H(mean_i softmax(-d^2(z_s_i, .)))`.
pub fn cluster_loss_var(g: &mut Graph, zs: Var, protos: Var, tau: f64) -> Var {
    let d2 = g.pair_sq_dist(zs, protos);
    let nearest = g.row_min(d2, None);
    let attraction = g.mean_all(nearest);
    if tau == 0.0 {
        return attraction;
    }
    let neg = g.scale(d2, -1.0);
    let soft = g.softmax_rows(neg);
    let avg = g.mean_rows(soft);
    // the offset keeps 0 * log 0 at zero when an assignment underflows
    let shifted = g.add_scalar(avg, 1e-300);
    let lg = g.log(shifted);
    let plogp = g.mul(avg, lg);
    let neg_entropy = g.sum_all(plogp);
    let pen = g.scale(neg_entropy, tau);
    g.add(attraction, pen)
}

pub fn cluster_loss(zs: &Tensor, lib: &SpuriousLibrary, tau: f64) -> Result<f64> {
    if zs.rows() == 0 {
        return Err(Error::Contract("cluster loss needs N >= 1".into()));
    }
    if zs.cols() != lib.prototypes.cols() {
        return Err(Error::Contract("latent / spurious prototype dimension mismatch".into()));
    }
    let mut g = Graph::new();
    let z = g.constant(zs.clone());
    let p = g.constant(lib.prototypes.clone());
    let l = cluster_loss_var(&mut g, z, p, tau);
    Ok(g.value(l).item())
}

/// Records `mean_i [min_{own} d^2 + max(0, margin - min_{other} d^2)]`.
/// With a single class the separation term is zero.
pub fn proto_loss_var(
    g: &mut Graph,
    zc: Var,
    protos: Var,
    labels: &[usize],
    class_of: &[usize],
    num_classes: usize,
    margin: f64,
) -> Var {
    let d2 = g.pair_sq_dist(zc, protos);
    let own: Vec<bool> = labels
        .iter()
        .flat_map(|&y| class_of.iter().map(move |&c| c == y))
        .collect();
    let attract = g.row_min(d2, Some(&own));
    let per_sample = if num_classes > 1 {
        let other: Vec<bool> = own.iter().map(|v| !v).collect();
        let sep = g.row_min(d2, Some(&other));
        let neg = g.scale(sep, -1.0);
        let gap = g.add_scalar(neg, margin);
        let hinge = g.relu(gap);
        g.add(attract, hinge)
    } else {
        attract
    };
    g.mean_all(per_sample)
}

pub fn proto_loss(zc: &Tensor, labels: &[usize], lib: &CausalLibrary, margin: f64) -> Result<f64> {
    if zc.rows() != labels.len() || zc.rows() == 0 {
        return Err(Error::Contract("proto loss needs one label per latent and N >= 1".into()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= lib.num_classes) {
        return Err(Error::Contract(format!("label {bad} out of range")));
    }
    let mut g = Graph::new();
    let z = g.constant(zc.clone());
    let p = g.constant(lib.prototypes.clone());
    let l = proto_loss_var(&mut g, z, p, labels, &lib.class_of, lib.num_classes, margin);
    Ok(g.value(l).item())
}
