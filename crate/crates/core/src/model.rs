//! Dual-branch convolutional encoders and the context fusion network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Graph, Var};
use crate::datagen::{to_batch, ImageSample};
use crate::error::{Error, Result};
use crate::nn::{he_normal, Linear, Mlp, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub latent_dim: usize,
    /// Output channels of each stride-2 3x3 conv block.
    pub channels: Vec<usize>,
    /// Share the first conv block between both branches.
    pub share_stem: bool,
    /// Standardize every latent dimension: batch statistics while
    /// training, running statistics at evaluation.
    pub latent_norm: bool,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            latent_dim: 64,
            channels: vec![8, 16, 32],
            share_stem: false,
            latent_norm: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Causal,
    Spurious,
}

impl Branch {
    fn prefix(self) -> &'static str {
        match self {
            Branch::Causal => "c",
            Branch::Spurious => "s",
        }
    }
}

/// Disentangled representations of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    pub z_c: Vec<f64>,
    pub z_s: Vec<f64>,
}

/// The parallel encoders `f_c` and `f_s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualEncoder {
    pub spec: EncoderSpec,
    pub image_size: usize,
    pub params: ParamSet,
    /// Running latent statistics, `<branch>.norm.mean` and `<branch>.norm.var`.
    pub stats: ParamSet,
}

/// Training-mode output of one branch.
pub struct BranchOut {
    pub z: Var,
    /// Latents before standardization.
    pub raw: Var,
}

const IN_CHANNELS: usize = 3;
const LATENT_EPS: f64 = 1e-5;
const STATS_MOMENTUM: f64 = 0.1;

impl DualEncoder {
    pub fn new(spec: EncoderSpec, image_size: usize, seed: u64) -> Result<Self> {
        if spec.channels.is_empty() || spec.latent_dim == 0 {
            return Err(Error::Config("encoder needs at least one conv block and latent_dim > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let init_branch = |params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, skip_first: bool| {
            let mut cin = IN_CHANNELS;
            for (i, &cout) in spec.channels.iter().enumerate() {
                if !(skip_first && i == 0) {
                    params.insert(conv_w(prefix, i), he_normal(&[cout, cin, 3, 3], cin * 9, rng));
                    params.insert(conv_b(prefix, i), Tensor::zeros(&[cout]));
                }
                cin = cout;
            }
            Linear::new(format!("{prefix}.head"), cin, spec.latent_dim).init(params, rng);
        };
        if spec.share_stem {
            let cout = spec.channels[0];
            params.insert(conv_w("stem", 0), he_normal(&[cout, IN_CHANNELS, 3, 3], IN_CHANNELS * 9, &mut rng));
            params.insert(conv_b("stem", 0), Tensor::zeros(&[cout]));
        }
        init_branch(&mut params, &mut rng, "c", spec.share_stem);
        init_branch(&mut params, &mut rng, "s", spec.share_stem);
        let mut stats = ParamSet::new();
        for b in [Branch::Causal, Branch::Spurious] {
            stats.insert(stat_name(b, "mean"), Tensor::zeros(&[spec.latent_dim]));
            stats.insert(stat_name(b, "var"), Tensor::new(vec![spec.latent_dim], vec![1.0; spec.latent_dim]));
        }
        Ok(DualEncoder {
            spec,
            image_size,
            params,
            stats,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != IN_CHANNELS || s[2] != self.image_size || s[3] != self.image_size {
            return Err(Error::Contract(format!(
                "encoder expects [B, 3, {n}, {n}] input, got {s:?}",
                n = self.image_size
            )));
        }
        Ok(())
    }

    fn forward_raw(&self, g: &mut Graph, p: &Bound, x: Var, branch: Branch) -> Var {
        let prefix = branch.prefix();
        let mut h = x;
        for i in 0..self.spec.channels.len() {
            let lp = if self.spec.share_stem && i == 0 { "stem" } else { prefix };
            h = g.conv2d(h, p[&conv_w(lp, i)], p[&conv_b(lp, i)], 2, 1);
            h = g.relu(h);
        }
        let pooled = g.global_avg_pool(h);
        let cin = *self.spec.channels.last().expect("non-empty channels");
        Linear::new(format!("{prefix}.head"), cin, self.spec.latent_dim).forward(g, p, pooled)
    }

    /// Training-mode branch on the tape; `x` is `[B, 3, H, W]`, output
    /// `[B, D]` standardized with the batch's own statistics.
    pub fn forward_branch(&self, g: &mut Graph, p: &Bound, x: Var, branch: Branch) -> BranchOut {
        let raw = self.forward_raw(g, p, x, branch);
        let z = if self.spec.latent_norm {
            g.standardize_cols(raw, LATENT_EPS)
        } else {
            raw
        };
        BranchOut { z, raw }
    }

    /// Evaluation-mode branch on the tape, using the running statistics.
    pub fn forward_branch_eval(&self, g: &mut Graph, p: &Bound, x: Var, branch: Branch) -> Var {
        let raw = self.forward_raw(g, p, x, branch);
        if !self.spec.latent_norm {
            return raw;
        }
        let mean = self.stats.get(&stat_name(branch, "mean")).expect("stats present");
        let var = self.stats.get(&stat_name(branch, "var")).expect("stats present");
        let shift = g.constant(mean.map(|m| -m));
        let centred = g.add_bias(raw, shift);
        let inv = Tensor::new(vec![var.len()], var.data().iter().map(|v| 1.0 / (v + LATENT_EPS).sqrt()).collect());
        let inv = g.constant(inv);
        g.mul_cols(centred, inv)
    }

    /// Exponential moving update of the running statistics from one
    /// training batch of raw latents.
    pub fn update_stats(&mut self, branch: Branch, raw: &Tensor) {
        if !self.spec.latent_norm || raw.rows() == 0 {
            return;
        }
        let (mean, var) = batch_moments(raw);
        for (key, batch) in [("mean", mean), ("var", var)] {
            let t = self.stats.get_mut(&stat_name(branch, key)).expect("stats present");
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - STATS_MOMENTUM) * *r + STATS_MOMENTUM * b;
            }
        }
    }

    /// Sets the running statistics to the exact moments over `samples`.
    pub fn calibrate(&mut self, samples: &[&ImageSample], chunk: usize) -> Result<()> {
        if !self.spec.latent_norm || samples.is_empty() {
            return Ok(());
        }
        for branch in [Branch::Causal, Branch::Spurious] {
            let mut rows = Vec::with_capacity(samples.len() * self.latent_dim());
            for part in samples.chunks(chunk.max(1)) {
                let x = to_batch(part);
                self.check_input(&x)?;
                let mut g = Graph::new();
                let p = g.bind(&self.params, false);
                let xv = g.constant(x);
                let raw = self.forward_raw(&mut g, &p, xv, branch);
                rows.extend_from_slice(g.value(raw).data());
            }
            let raw = Tensor::new(vec![samples.len(), self.latent_dim()], rows);
            let (mean, var) = batch_moments(&raw);
            self.stats.insert(stat_name(branch, "mean"), Tensor::new(vec![mean.len()], mean));
            self.stats.insert(stat_name(branch, "var"), Tensor::new(vec![var.len()], var));
        }
        Ok(())
    }

    /// Evaluation-mode forward of one branch over a batch.
    pub fn encode_branch(&self, x: &Tensor, branch: Branch) -> Result<Tensor> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let xv = g.constant(x.clone());
        let z = self.forward_branch_eval(&mut g, &p, xv, branch);
        let out = g.value(z).clone();
        if !out.all_finite() {
            return Err(Error::numeric("encoder", "non-finite latent"));
        }
        Ok(out)
    }

    /// Batched `(Z_C, Z_S)`, each `[B, D]`.
    pub fn encode_batch(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.encode_branch(x, Branch::Causal)?, self.encode_branch(x, Branch::Spurious)?))
    }

    pub fn encode(&self, sample: &ImageSample) -> Result<LatentPair> {
        let (zc, zs) = self.encode_batch(&to_batch(&[sample]))?;
        Ok(LatentPair {
            z_c: zc.row(0).to_vec(),
            z_s: zs.row(0).to_vec(),
        })
    }

    /// Encodes many samples in chunks; rows follow input order.
    pub fn encode_samples(&self, samples: &[&ImageSample], branch: Branch, chunk: usize) -> Result<Tensor> {
        let d = self.latent_dim();
        let mut data = Vec::with_capacity(samples.len() * d);
        for part in samples.chunks(chunk.max(1)) {
            data.extend(self.encode_branch(&to_batch(part), branch)?.into_data());
        }
        Ok(Tensor::new(vec![samples.len(), d], data))
    }
}

fn stat_name(branch: Branch, key: &str) -> String {
    format!("{}.norm.{key}", branch.prefix())
}

/// Column means and biased variances.
fn batch_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let mut mean = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

fn conv_w(prefix: &str, i: usize) -> String {
    format!("{prefix}.conv{i}.weight")
}

fn conv_b(prefix: &str, i: usize) -> String {
    format!("{prefix}.conv{i}.bias")
}

/// `F(z_c, p_s)`: concatenation, one hidden ReLU layer, class logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionNet {
    pub mlp: Mlp,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub params: ParamSet,
}

impl FusionNet {
    pub fn new(latent_dim: usize, hidden: usize, num_classes: usize, seed: u64) -> Self {
        let mlp = Mlp::new("fusion", &[2 * latent_dim, hidden, num_classes]);
        let mut params = ParamSet::new();
        mlp.init(&mut params, &mut ChaCha8Rng::seed_from_u64(seed));
        FusionNet {
            mlp,
            latent_dim,
            num_classes,
            params,
        }
    }

    /// Logits for a `[R, 2D]` block of concatenated `(z_c, p_s)` rows.
    pub fn forward(&self, g: &mut Graph, p: &Bound, pairs: Var) -> Var {
        self.mlp.forward(g, p, pairs)
    }

    pub fn fuse_logits(&self, z_c: &[f64], p_s: &[f64]) -> Result<Vec<f64>> {
        if z_c.len() != self.latent_dim || p_s.len() != self.latent_dim {
            return Err(Error::Contract(format!(
                "fusion expects two {}-vectors, got {} and {}",
                self.latent_dim,
                z_c.len(),
                p_s.len()
            )));
        }
        let mut row = z_c.to_vec();
        row.extend_from_slice(p_s);
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let x = g.constant(Tensor::new(vec![1, 2 * self.latent_dim], row));
        let y = self.forward(&mut g, &p, x);
        let out = g.value(y).data().to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("fusion", "non-finite logits"));
        }
        Ok(out)
    }
}
