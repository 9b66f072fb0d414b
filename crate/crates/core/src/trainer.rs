//! The joint objective, the training loop, evaluation, checkpoints and the
//! ablation suite.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{apply_column_stats, column_stats, softmax_in_place, Bound, Graph, Var};
use crate::club::{club_penalty_var, estimate_bound, fit_q, fit_q_step, GaussianCondModel};
use crate::config::{variant_name, Ablation, RunConfig, TrainConfig};
use crate::datagen::{splitmix, to_batch, ImageSample};
use crate::error::{Error, Result};
use crate::intervention::{intervene, intervene_batch, intervened_log_probs_var, InterventionOutput};
use crate::metrics::{
    classification_metrics, prototype_purity, spurious_diversity, ClassificationMetrics, MetricsReport,
};
use crate::model::{Branch, DualEncoder, EncoderSpec, FusionNet};
use crate::nn::{cosine_lr, Adam, Linear, ParamSet};
use crate::prototypes::{
    causal_class_probs, causal_log_probs_var, class_layout, cluster_loss_var, project_prototypes, proto_loss_var,
    CausalLibrary, SpuriousLibrary,
};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 64;
const MI_EPS: f64 = 1e-8;
const CHECKPOINT_FORMAT: &str = "causalproto-checkpoint-v1";

fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix(seed ^ splitmix(tag))
}

/// Coefficients of the four objective terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub cluster: f64,
    pub proto: f64,
    pub mi: f64,
}

/// Per-term values of one evaluation of the objective. Terms that were not
/// computed (zero coefficient) are reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub cluster: f64,
    pub proto: f64,
    pub mi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub encoder: Adam,
    pub fusion: Adam,
    pub prototypes: Adam,
    pub head: Adam,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub num_classes: usize,
    pub image_size: usize,
    pub encoder: DualEncoder,
    pub fusion: FusionNet,
    /// Linear classifier on `z_c`, used only by the ERM baseline.
    pub head: ParamSet,
    pub causal: CausalLibrary,
    /// Unused under `shared_proto`, where the causal matrix serves both roles.
    pub spurious: SpuriousLibrary,
    pub q: GaussianCondModel,
    pub optim: Optimizers,
    pub epoch: usize,
    pub step: usize,
    pub steps_per_epoch: usize,
}

/// Graph handles produced by the encoder half of a step.
struct Encoded {
    enc: Bound,
    zc: Var,
    zs: Option<Var>,
    /// Pre-standardization latents, for the running statistics.
    raw: (Var, Option<Var>),
    /// `(Z_C, Z_S)` as seen by the MI estimator.
    mi: Option<(Var, Var)>,
}

/// Graph handles produced by the objective half of a step.
struct Objective {
    total: Var,
    terms: LossBreakdown,
    logp: Var,
    fusion: Option<Bound>,
    head: Option<Bound>,
    pc: Option<Var>,
    ps: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub loss: LossBreakdown,
    pub q_nll: Option<f64>,
    pub correct: usize,
    pub batch: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub variant: String,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub q_nll: Option<f64>,
    pub train_acc: f64,
    pub val_bacc: Option<f64>,
    pub projected: bool,
}

pub struct Evaluation {
    pub probs: Tensor,
    pub preds: Vec<usize>,
    pub labels: Vec<usize>,
    pub metrics: ClassificationMetrics,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn labels_of(samples: &[&ImageSample]) -> Vec<usize> {
    samples.iter().map(|s| s.label).collect()
}

impl TrainState {
    /// Fresh state; prototypes are initialized from latents of `train`.
    pub fn new(config: TrainConfig, num_classes: usize, image_size: usize, train: &[&ImageSample]) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        if let Some(bad) = train.iter().find(|s| s.label >= num_classes) {
            return Err(Error::Contract(format!("sample {} has label {} >= {num_classes}", bad.sample_id, bad.label)));
        }
        let seed = config.seed;
        let spec = EncoderSpec {
            latent_dim: config.latent_dim,
            channels: config.channels.clone(),
            share_stem: config.share_stem,
            latent_norm: config.latent_norm,
        };
        let mut encoder = DualEncoder::new(spec, image_size, derive_seed(seed, 1))?;
        encoder.calibrate(train, EVAL_CHUNK)?;
        let fusion = FusionNet::new(config.latent_dim, config.fusion_hidden, num_classes, derive_seed(seed, 2));
        let q = GaussianCondModel::new(config.latent_dim, config.q_hidden, derive_seed(seed, 3));
        let mut head = ParamSet::new();
        if config.has(Ablation::ErmBaseline) {
            Linear::new("erm.head", config.latent_dim, num_classes)
                .init(&mut head, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 4)));
        }
        let labels = labels_of(train);
        let zc = encoder.encode_samples(train, Branch::Causal, EVAL_CHUNK)?;
        let class_of = if config.has(Ablation::ErmBaseline) {
            (0..num_classes).collect()
        } else {
            class_layout(num_classes, config.k_per_class, config.k_mode)?
        };
        let causal = CausalLibrary::init_from_latents(class_of, num_classes, &zc, &labels, derive_seed(seed, 5))?;
        let spurious = if config.has(Ablation::SharedProto) {
            SpuriousLibrary::new(causal.prototypes.clone())?
        } else {
            let zs = encoder.encode_samples(train, Branch::Spurious, EVAL_CHUNK)?;
            SpuriousLibrary::init_from_latents(config.m, &zs, derive_seed(seed, 6))?
        };
        let wd = config.weight_decay;
        let steps_per_epoch = train.len().div_ceil(config.batch_size);
        Ok(TrainState {
            config,
            num_classes,
            image_size,
            encoder,
            fusion,
            head,
            causal,
            spurious,
            q,
            optim: Optimizers {
                encoder: Adam::new(wd),
                fusion: Adam::new(wd),
                prototypes: Adam::new(wd),
                head: Adam::new(wd),
            },
            epoch: 0,
            step: 0,
            steps_per_epoch,
        })
    }

    pub fn variant(&self) -> String {
        self.config.variant()
    }

    fn is_erm(&self) -> bool {
        self.config.has(Ablation::ErmBaseline)
    }

    fn is_shared(&self) -> bool {
        self.config.has(Ablation::SharedProto)
    }

    /// The dictionary used as spurious contexts.
    pub fn spurious_view(&self) -> SpuriousLibrary {
        if self.is_shared() {
            SpuriousLibrary {
                prototypes: self.causal.prototypes.clone(),
            }
        } else {
            self.spurious.clone()
        }
    }

    /// Objective coefficients after applying the ablation flags.
    pub fn loss_weights(&self) -> LossWeights {
        let c = &self.config;
        if self.is_erm() {
            return LossWeights {
                ce: 1.0,
                cluster: 0.0,
                proto: 0.0,
                mi: 0.0,
            };
        }
        LossWeights {
            ce: 1.0,
            cluster: if c.has(Ablation::NoCluster) { 0.0 } else { c.lambda1 },
            proto: c.lambda2,
            mi: if c.has(Ablation::NoMi) { 0.0 } else { c.beta },
        }
    }

    pub fn total_steps(&self) -> usize {
        self.config.epochs * self.steps_per_epoch
    }

    fn encode_phase(&self, g: &mut Graph, x: &Tensor, w: LossWeights) -> Encoded {
        let enc = g.bind(&self.encoder.params, true);
        let xv = g.constant(x.clone());
        let c = self.encoder.forward_branch(g, &enc, xv, Branch::Causal);
        let s = self
            .needs_spurious(w)
            .then(|| self.encoder.forward_branch(g, &enc, xv, Branch::Spurious));
        let (zc, zs) = (c.z, s.as_ref().map(|s| s.z));
        let raw = (c.raw, s.map(|s| s.raw));
        let mi = match zs {
            Some(zs) if w.mi != 0.0 => Some(if self.config.mi_standardize {
                (g.standardize_cols(zc, MI_EPS), g.standardize_cols(zs, MI_EPS))
            } else {
                (zc, zs)
            }),
            _ => None,
        };
        Encoded { enc, zc, zs, raw, mi }
    }

    fn objective_phase(
        &self,
        g: &mut Graph,
        e: &Encoded,
        labels: &[usize],
        w: LossWeights,
        contexts: Option<&[usize]>,
    ) -> Result<Objective> {
        let cfg = &self.config;
        let mut terms = LossBreakdown::default();
        let mut parts: Vec<(Var, f64)> = Vec::new();
        let check = |name: &str, v: f64| -> Result<f64> {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::numeric(name, format!("loss term evaluated to {v}")))
            }
        };

        if self.is_erm() {
            let head = g.bind(&self.head, true);
            let logits = Linear::new("erm.head", cfg.latent_dim, self.num_classes).forward(g, &head, e.zc);
            let logp = g.log_softmax_rows(logits);
            let ce = g.nll_rows(logp, labels);
            terms.ce = check("ce", g.value(ce).item())?;
            let total = g.scale(ce, w.ce);
            terms.total = g.value(total).item();
            return Ok(Objective {
                total,
                terms,
                logp,
                fusion: None,
                head: Some(head),
                pc: None,
                ps: None,
            });
        }

        let pc = g.param(self.causal.prototypes.clone());
        let needs_ps = w.cluster != 0.0 || !cfg.has(Ablation::NoDo);
        let ps = if self.is_shared() {
            Some(pc)
        } else if needs_ps {
            Some(g.param(self.spurious.prototypes.clone()))
        } else {
            None
        };

        let mut fusion = None;
        let logp = if cfg.has(Ablation::NoDo) {
            causal_log_probs_var(g, e.zc, pc, &self.causal.class_of, self.num_classes, cfg.logit_distance)
        } else {
            let ps = ps.expect("contexts available");
            let ps_ce = if cfg.freeze_ps_in_ce {
                let v = g.value(ps).clone();
                g.constant(v)
            } else {
                ps
            };
            let m = g.value(ps).rows();
            let (ctx, weights) = match contexts {
                Some(idx) => {
                    let mut sel = Tensor::zeros(&[idx.len(), m]);
                    for (r, &i) in idx.iter().enumerate() {
                        sel.row_mut(r)[i] = 1.0;
                    }
                    let s = g.constant(sel);
                    let w = match &cfg.context_weights {
                        Some(cw) => {
                            let total: f64 = idx.iter().map(|&i| cw[i]).sum();
                            idx.iter().map(|&i| cw[i] / total).collect()
                        }
                        None => vec![1.0 / idx.len() as f64; idx.len()],
                    };
                    (g.matmul(s, ps_ce), w)
                }
                None => (
                    ps_ce,
                    cfg.context_weights.clone().unwrap_or_else(|| vec![1.0 / m as f64; m]),
                ),
            };
            let fb = g.bind(&self.fusion.params, true);
            let lp = intervened_log_probs_var(g, &self.fusion, &fb, e.zc, ctx, weights, cfg.nwgm_mode);
            fusion = Some(fb);
            lp
        };
        let ce = g.nll_rows(logp, labels);
        terms.ce = check("ce", g.value(ce).item())?;
        parts.push((ce, w.ce));

        if w.cluster != 0.0 {
            let zs = e.zs.ok_or_else(|| Error::Contract("cluster term needs spurious latents".into()))?;
            let l = cluster_loss_var(g, zs, ps.expect("contexts available"), cfg.tau);
            terms.cluster = check("cluster", g.value(l).item())?;
            parts.push((l, w.cluster));
        }
        if w.proto != 0.0 {
            let l = proto_loss_var(g, e.zc, pc, labels, &self.causal.class_of, self.num_classes, cfg.margin);
            terms.proto = check("proto", g.value(l).item())?;
            parts.push((l, w.proto));
        }
        if w.mi != 0.0 {
            let (zc, zs) = e.mi.ok_or_else(|| Error::Contract("MI term needs spurious latents".into()))?;
            let mut l = club_penalty_var(g, &self.q, zc, zs);
            terms.mi = check("mi", g.value(l).item())?;
            if cfg.clamp_mi {
                l = g.relu(l);
            }
            parts.push((l, w.mi));
        }
        let mut total = g.scale(parts[0].0, parts[0].1);
        for &(v, c) in &parts[1..] {
            let s = g.scale(v, c);
            total = g.add(total, s);
        }
        terms.total = check("total", g.value(total).item())?;
        Ok(Objective {
            total,
            terms,
            logp,
            fusion,
            head: None,
            pc: Some(pc),
            ps: if self.is_shared() { None } else { ps },
        })
    }

    fn needs_spurious(&self, w: LossWeights) -> bool {
        !self.is_erm() && (w.cluster != 0.0 || w.mi != 0.0)
    }

    /// Evaluates the objective on a batch without touching any state.
    pub fn total_loss(&self, batch: &[&ImageSample], w: LossWeights) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Contract("objective needs a non-empty batch".into()));
        }
        let mut g = Graph::new();
        let e = self.encode_phase(&mut g, &to_batch(batch), w);
        Ok(self.objective_phase(&mut g, &e, &labels_of(batch), w, None)?.terms)
    }

    /// Gradients of the weighted objective with respect to every trainable
    /// tensor, keyed `encoder/<name>`, `fusion/<name>`, `head/<name>`,
    /// `proto/causal` and `proto/spurious`.
    pub fn loss_gradients(&self, batch: &[&ImageSample], w: LossWeights) -> Result<BTreeMap<String, Tensor>> {
        let mut g = Graph::new();
        let e = self.encode_phase(&mut g, &to_batch(batch), w);
        let o = self.objective_phase(&mut g, &e, &labels_of(batch), w, None)?;
        g.backward(o.total);
        Ok(collect_grads(&g, &e, &o))
    }

    fn contexts_for_step(&self) -> Option<Vec<usize>> {
        let k = self.config.subsample_contexts?;
        let m = self.spurious_view().len();
        if k >= m {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, 1_000_000 + self.step as u64));
        let mut idx = sample(&mut rng, m, k).into_vec();
        idx.sort_unstable();
        Some(idx)
    }

    /// One conditional-model update followed by one update of everything else.
    pub fn train_step(&mut self, batch: &[&ImageSample]) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::Contract("training step needs a non-empty batch".into()));
        }
        let total_steps = self.total_steps().max(1);
        let lr = cosine_lr(self.config.learning_rate, self.step, total_steps);
        let q_lr = cosine_lr(self.config.q_lr(), self.step, total_steps);
        let w = self.loss_weights();
        let labels = labels_of(batch);
        let contexts = self.contexts_for_step();

        let mut g = Graph::new();
        let e = self.encode_phase(&mut g, &to_batch(batch), w);
        let q_nll = match e.mi {
            Some((zc, zs)) => {
                let (zc_v, zs_v) = (g.value(zc).clone(), g.value(zs).clone());
                Some(fit_q_step(&zc_v, &zs_v, &mut self.q, q_lr)?)
            }
            _ => None,
        };
        let o = self.objective_phase(&mut g, &e, &labels, w, contexts.as_deref())?;
        if o.terms.total > self.config.max_loss {
            return Err(Error::Diverged {
                epoch: self.epoch,
                step: self.step,
                detail: format!("loss {} exceeds {}", o.terms.total, self.config.max_loss),
            });
        }
        let lp = g.value(o.logp);
        let correct = (0..labels.len()).filter(|&i| argmax(lp.row(i)) == labels[i]).count();
        g.backward(o.total);
        let grads = collect_grads(&g, &e, &o);
        if let Some((name, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::numeric("gradient", format!("non-finite gradient for {name}")));
        }
        let raw_c = g.value(e.raw.0).clone();
        let raw_s = e.raw.1.map(|v| g.value(v).clone());
        self.apply(&grads, lr);
        self.encoder.update_stats(Branch::Causal, &raw_c);
        if let Some(raw_s) = raw_s {
            self.encoder.update_stats(Branch::Spurious, &raw_s);
        }
        self.step += 1;
        Ok(StepRecord {
            loss: o.terms,
            q_nll,
            correct,
            batch: labels.len(),
            lr,
        })
    }

    fn apply(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) {
        let pick = |prefix: &str| -> BTreeMap<String, Tensor> {
            grads
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
                .collect()
        };
        self.optim.encoder.step(&mut self.encoder.params, &pick("encoder/"), lr);
        self.optim.fusion.step(&mut self.fusion.params, &pick("fusion/"), lr);
        self.optim.head.step(&mut self.head, &pick("head/"), lr);
        let pg = pick("proto/");
        if !pg.is_empty() {
            let mut protos = ParamSet::new();
            protos.insert("causal", self.causal.prototypes.clone());
            protos.insert("spurious", self.spurious.prototypes.clone());
            self.optim.prototypes.step(&mut protos, &pg, lr);
            self.causal.prototypes = protos.get("causal").expect("present").clone();
            if self.is_shared() {
                self.spurious.prototypes = self.causal.prototypes.clone();
            } else {
                self.spurious.prototypes = protos.get("spurious").expect("present").clone();
            }
        }
    }

    /// `(Z_C, Z_S)` for a sample list; `Z_S` is absent for the ERM baseline.
    pub fn latents(&self, samples: &[&ImageSample]) -> Result<(Tensor, Option<Tensor>)> {
        let zc = self.encoder.encode_samples(samples, Branch::Causal, EVAL_CHUNK)?;
        let zs = if self.is_erm() {
            None
        } else {
            Some(self.encoder.encode_samples(samples, Branch::Spurious, EVAL_CHUNK)?)
        };
        Ok((zc, zs))
    }

    /// Class probabilities `[N, C]` along the variant's inference path.
    pub fn predict_from_latents(&self, zc: &Tensor) -> Result<Tensor> {
        let c = self.num_classes;
        if self.is_erm() {
            let mut g = Graph::new();
            let p = g.bind(&self.head, false);
            let z = g.constant(zc.clone());
            let logits = Linear::new("erm.head", self.config.latent_dim, c).forward(&mut g, &p, z);
            let mut out = g.value(logits).clone();
            for i in 0..out.rows() {
                softmax_in_place(out.row_mut(i));
            }
            return Ok(out);
        }
        if self.config.has(Ablation::NoDo) {
            let mut data = Vec::with_capacity(zc.rows() * c);
            for i in 0..zc.rows() {
                data.extend(causal_class_probs(zc.row(i), &self.causal, self.config.logit_distance)?);
            }
            return Ok(Tensor::new(vec![zc.rows(), c], data));
        }
        intervene_batch(
            zc,
            &self.spurious_view(),
            &self.fusion,
            self.config.context_weights.as_deref(),
            self.config.nwgm_mode,
        )
    }

    /// Per-context breakdown for one causal latent; `None` for variants
    /// that do not intervene.
    pub fn intervention(&self, z_c: &[f64]) -> Result<Option<InterventionOutput>> {
        if self.is_erm() || self.config.has(Ablation::NoDo) {
            return Ok(None);
        }
        intervene(
            z_c,
            &self.spurious_view(),
            &self.fusion,
            self.config.context_weights.as_deref(),
            self.config.nwgm_mode,
        )
        .map(Some)
    }

    pub fn predict_probs(&self, samples: &[&ImageSample]) -> Result<Tensor> {
        let zc = self.encoder.encode_samples(samples, Branch::Causal, EVAL_CHUNK)?;
        self.predict_from_latents(&zc)
    }

    pub fn evaluate(&self, samples: &[&ImageSample]) -> Result<Evaluation> {
        let probs = self.predict_probs(samples)?;
        let preds: Vec<usize> = (0..probs.rows()).map(|i| argmax(probs.row(i))).collect();
        let labels = labels_of(samples);
        let metrics = classification_metrics(&preds, &labels, self.num_classes)?;
        Ok(Evaluation {
            probs,
            preds,
            labels,
            metrics,
        })
    }

    /// Moves every causal prototype onto its nearest same-class training
    /// latent. The ERM baseline instead gets one post-hoc prototype per
    /// class: the training latent closest to the class mean.
    pub fn project(&mut self, train: &[&ImageSample]) -> Result<()> {
        let zc = self.encoder.encode_samples(train, Branch::Causal, EVAL_CHUNK)?;
        let labels = labels_of(train);
        let ids: Vec<String> = train.iter().map(|s| s.sample_id.clone()).collect();
        if self.is_erm() {
            let d = zc.cols();
            let mut means = Tensor::zeros(&[self.num_classes, d]);
            let mut counts = vec![0usize; self.num_classes];
            for (i, &y) in labels.iter().enumerate() {
                counts[y] += 1;
                for (m, v) in means.row_mut(y).iter_mut().zip(zc.row(i)) {
                    *m += v;
                }
            }
            for (y, &n) in counts.iter().enumerate() {
                if n == 0 {
                    return Err(Error::Contract(format!("class {y} absent from projection latents")));
                }
                means.row_mut(y).iter_mut().for_each(|v| *v /= n as f64);
            }
            let lib = CausalLibrary::new(means, (0..self.num_classes).collect(), self.num_classes)?;
            self.causal = project_prototypes(&lib, &zc, &labels, &ids)?;
            return Ok(());
        }
        self.causal = project_prototypes(&self.causal, &zc, &labels, &ids)?;
        if self.is_shared() {
            self.spurious.prototypes = self.causal.prototypes.clone();
        }
        Ok(())
    }

    /// Test-set classification scores plus the disentanglement measures.
    ///
    /// The MI bound is reported by a conditional model fitted from scratch
    /// on training latents and evaluated on test latents, so every variant
    /// is measured the same way whether or not it trained one.
    pub fn report(&self, train: &[&ImageSample], test: &[&ImageSample], seed: u64) -> Result<MetricsReport> {
        let eval = self.evaluate(test)?;
        let (zc_tr, zs_tr) = self.latents(train)?;
        let (zc_te, zs_te) = self.latents(test)?;
        let labels = labels_of(train);
        let n = self.config.purity_neighbors.min(labels.len());
        let purity = prototype_purity(&self.causal, &zc_tr, &labels, n)?;
        let (nmi, div) = match (zs_tr, zs_te) {
            (Some(zs_tr), Some(zs_te)) => {
                let c = &self.config;
                let div = spurious_diversity(&zs_te, &self.spurious_view())?;
                let (zc_tr, zs_tr, zc_te, zs_te) = if c.mi_standardize {
                    let (mc, ic) = column_stats(&zc_tr, MI_EPS);
                    let (ms, is) = column_stats(&zs_tr, MI_EPS);
                    (
                        apply_column_stats(&zc_tr, &mc, &ic),
                        apply_column_stats(&zs_tr, &ms, &is),
                        apply_column_stats(&zc_te, &mc, &ic),
                        apply_column_stats(&zs_te, &ms, &is),
                    )
                } else {
                    (zc_tr, zs_tr, zc_te, zs_te)
                };
                let mut q = GaussianCondModel::new(c.latent_dim, c.q_hidden, derive_seed(c.seed, 7));
                fit_q(&zc_tr, &zs_tr, &mut q, c.mi_eval_steps, c.mi_eval_batch, c.mi_eval_lr, derive_seed(c.seed, 8))?;
                let nmi = estimate_bound(&zc_te, &zs_te, &q, None)?;
                (nmi, div)
            }
            _ => (f64::NAN, f64::NAN),
        };
        Ok(MetricsReport {
            variant: self.variant(),
            seed,
            acc: eval.metrics.acc,
            bacc: eval.metrics.bacc,
            f1: eval.metrics.macro_f1,
            nmi,
            purity,
            div,
        })
    }
}

fn collect_grads(g: &Graph, e: &Encoded, o: &Objective) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    let mut take = |prefix: &str, bound: &Bound| {
        for (name, &v) in bound {
            if let Some(t) = g.grad(v) {
                out.insert(format!("{prefix}/{name}"), t.clone());
            }
        }
    };
    take("encoder", &e.enc);
    if let Some(b) = &o.fusion {
        take("fusion", b);
    }
    if let Some(b) = &o.head {
        take("head", b);
    }
    for (name, v) in [("causal", o.pc), ("spurious", o.ps)] {
        if let Some(t) = v.and_then(|v| g.grad(v)) {
            out.insert(format!("proto/{name}"), t.clone());
        }
    }
    out
}

/// Drives [`TrainState`] over epochs of a fixed training set.
pub struct Trainer<'a> {
    pub state: TrainState,
    train: Vec<&'a ImageSample>,
    val: Vec<&'a ImageSample>,
    order: Option<(usize, Vec<usize>)>,
    best: Option<(f64, TrainState)>,
    pub log: Vec<EpochRecord>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, num_classes: usize, train: &'a [ImageSample], val: &'a [ImageSample]) -> Result<Self> {
        let image_size = train
            .first()
            .map(|s| s.height)
            .ok_or_else(|| Error::Contract("training set is empty".into()))?;
        let refs: Vec<&ImageSample> = train.iter().collect();
        let state = TrainState::new(config, num_classes, image_size, &refs)?;
        Ok(Self::resume(state, train, val))
    }

    /// Continues from a saved state; data must be the same as when it was saved.
    pub fn resume(state: TrainState, train: &'a [ImageSample], val: &'a [ImageSample]) -> Self {
        Trainer {
            state,
            train: train.iter().collect(),
            val: val.iter().collect(),
            order: None,
            best: None,
            log: Vec::new(),
        }
    }

    fn epoch_order(&mut self, epoch: usize) -> &[usize] {
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut idx: Vec<usize> = (0..self.train.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.state.config.seed, 100 + epoch as u64));
            idx.shuffle(&mut rng);
            self.order = Some((epoch, idx));
        }
        &self.order.as_ref().expect("just set").1
    }

    pub fn finished(&self) -> bool {
        self.state.step >= self.state.total_steps()
    }

    /// Runs the next batch of the current epoch.
    pub fn step(&mut self) -> Result<StepRecord> {
        let spe = self.state.steps_per_epoch;
        let epoch = self.state.step / spe;
        let b = self.state.step % spe;
        let bs = self.state.config.batch_size;
        let order = self.epoch_order(epoch);
        let idx: Vec<usize> = order[b * bs..((b + 1) * bs).min(order.len())].to_vec();
        let batch: Vec<&ImageSample> = idx.iter().map(|&i| self.train[i]).collect();
        self.state.train_step(&batch)
    }

    /// Finishes the current epoch, then projects and validates as scheduled.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let mut sum = LossBreakdown::default();
        let (mut q_sum, mut q_n, mut correct, mut seen, mut n) = (0.0, 0usize, 0, 0, 0);
        let mut lr;
        loop {
            let r = self.step()?;
            sum.total += r.loss.total;
            sum.ce += r.loss.ce;
            sum.cluster += r.loss.cluster;
            sum.proto += r.loss.proto;
            sum.mi += r.loss.mi;
            if let Some(v) = r.q_nll {
                q_sum += v;
                q_n += 1;
            }
            correct += r.correct;
            seen += r.batch;
            n += 1;
            lr = r.lr;
            if self.state.step.is_multiple_of(self.state.steps_per_epoch) {
                break;
            }
        }
        let k = n as f64;
        let loss = LossBreakdown {
            total: sum.total / k,
            ce: sum.ce / k,
            cluster: sum.cluster / k,
            proto: sum.proto / k,
            mi: sum.mi / k,
        };
        self.state.epoch += 1;
        let cfg = &self.state.config;
        let projected = !self.state.is_erm()
            && self.state.epoch >= cfg.projection_warmup
            && self.state.epoch.is_multiple_of(cfg.projection_period);
        if projected {
            let train = self.train.clone();
            self.state.project(&train)?;
        }
        let val_bacc = if self.val.is_empty() {
            None
        } else {
            Some(self.state.evaluate(&self.val)?.metrics.bacc)
        };
        if let Some(b) = val_bacc {
            if self.best.as_ref().is_none_or(|(best, _)| b > *best) {
                self.best = Some((b, self.state.clone()));
            }
        }
        let rec = EpochRecord {
            variant: self.state.variant(),
            epoch: self.state.epoch,
            lr,
            loss,
            q_nll: (q_n > 0).then(|| q_sum / q_n as f64),
            train_acc: correct as f64 / seen as f64,
            val_bacc,
            projected,
        };
        self.log.push(rec.clone());
        Ok(rec)
    }

    /// Trains to the configured epoch count, restores the best validation
    /// epoch if requested, and projects once more.
    pub fn run(mut self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
        while !self.finished() {
            let rec = self.run_epoch()?;
            on_epoch(&rec);
        }
        let mut best_epoch = None;
        if self.state.config.select_best {
            if let Some((_, s)) = self.best.take() {
                best_epoch = Some(s.epoch);
                self.state = s;
            }
        }
        let train = self.train.clone();
        self.state.project(&train)?;
        Ok(TrainOutcome {
            state: self.state,
            log: self.log,
            best_epoch,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config_hash: String,
    state: TrainState,
}

fn train_config_hash(c: &TrainConfig) -> String {
    RunConfig {
        train: c.clone(),
        ..RunConfig::default()
    }
    .hash()
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        config_hash: train_config_hash(&state.config),
        state: state.clone(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format '{}'", file.format)));
    }
    if file.config_hash != train_config_hash(&file.state.config) {
        return Err(Error::Checkpoint("config hash does not match stored config".into()));
    }
    Ok(file.state)
}

/// The six variants of the ablation table, in reporting order.
pub const SUITE_VARIANTS: [&[Ablation]; 6] = [
    &[],
    &[Ablation::NoMi],
    &[Ablation::NoCluster],
    &[Ablation::NoDo],
    &[Ablation::SharedProto],
    &[Ablation::ErmBaseline],
];

pub struct SuiteData {
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    pub num_classes: usize,
}

pub struct SuiteRun {
    pub report: MetricsReport,
    pub outcome: TrainOutcome,
}

/// Trains every variant for every seed on the same data.
pub fn run_ablation_suite(
    base: &TrainConfig,
    data: &SuiteData,
    seeds: &[u64],
    mut progress: impl FnMut(&str, u64, &EpochRecord),
) -> Result<Vec<SuiteRun>> {
    let train: Vec<&ImageSample> = data.train.iter().collect();
    let test: Vec<&ImageSample> = data.test.iter().collect();
    let mut out = Vec::with_capacity(seeds.len() * SUITE_VARIANTS.len());
    for &seed in seeds {
        for variant in SUITE_VARIANTS {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.ablation = variant.to_vec();
            let name = variant_name(variant);
            let trainer = Trainer::new(cfg, data.num_classes, &data.train, &data.val)?;
            let outcome = trainer.run(|r| progress(&name, seed, r))?;
            let report = outcome.state.report(&train, &test, seed)?;
            out.push(SuiteRun { report, outcome });
        }
    }
    Ok(out)
}

pub fn write_results_csv(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in reports {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, ScmConfig, Split};

    fn data(n: usize, rho: f64, seed: u64) -> Vec<ImageSample> {
        let cfg = ScmConfig {
            num_classes: 2,
            num_artifacts: 2,
            image_size: 16,
            rho_train: rho,
            samples_per_split: n,
            seed,
            ..ScmConfig::default()
        };
        generate_dataset(&cfg, Split::Train).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            latent_dim: 4,
            channels: vec![3],
            fusion_hidden: 5,
            q_hidden: 6,
            k_per_class: 1,
            m: 3,
            batch_size: 2,
            epochs: 1,
            learning_rate: 1e-2,
            projection_period: 1,
            projection_warmup: 1,
            mi_eval_steps: 5,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    fn tiny_state(cfg: TrainConfig, samples: &[ImageSample]) -> TrainState {
        let refs: Vec<&ImageSample> = samples.iter().collect();
        TrainState::new(cfg, 2, 16, &refs).unwrap()
    }

    fn param_mut<'s>(st: &'s mut TrainState, key: &str) -> &'s mut Tensor {
        let (group, name) = key.split_once('/').unwrap();
        match group {
            "encoder" => st.encoder.params.get_mut(name).unwrap(),
            "fusion" => st.fusion.params.get_mut(name).unwrap(),
            "head" => st.head.get_mut(name).unwrap(),
            _ if name == "causal" => &mut st.causal.prototypes,
            _ => &mut st.spurious.prototypes,
        }
    }

    fn all_keys(st: &TrainState) -> Vec<String> {
        let mut keys: Vec<String> = st.encoder.params.iter().map(|(k, _)| format!("encoder/{k}")).collect();
        keys.extend(st.fusion.params.iter().map(|(k, _)| format!("fusion/{k}")));
        keys.extend(st.head.iter().map(|(k, _)| format!("head/{k}")));
        keys.push("proto/causal".into());
        if !st.config.has(Ablation::SharedProto) {
            keys.push("proto/spurious".into());
        }
        keys
    }

    /// Central differences against the tape gradient, per parameter tensor.
    fn grad_check(st: &TrainState, batch: &[&ImageSample], w: LossWeights) {
        let grads = st.loss_gradients(batch, w).unwrap();
        let h = 1e-5;
        for key in all_keys(st) {
            let analytic = grads.get(&key).cloned().unwrap_or_else(|| {
                let mut s = st.clone();
                Tensor::zeros(param_mut(&mut s, &key).shape())
            });
            let mut numeric = vec![0.0; analytic.len()];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let mut plus = st.clone();
                param_mut(&mut plus, &key).data_mut()[i] += h;
                let mut minus = st.clone();
                param_mut(&mut minus, &key).data_mut()[i] -= h;
                if st.config.has(Ablation::SharedProto) && key == "proto/causal" {
                    plus.spurious.prototypes = plus.causal.prototypes.clone();
                    minus.spurious.prototypes = minus.causal.prototypes.clone();
                }
                let fp = plus.total_loss(batch, w).unwrap().total;
                let fm = minus.total_loss(batch, w).unwrap().total;
                *slot = (fp - fm) / (2.0 * h);
            }
            let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
            let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
            let scale = na.max(nn);
            assert!(diff <= 1e-4 * scale + 1e-9, "{key}: |a-n| = {diff:e}, |a| = {na:e}, |n| = {nn:e} for {w:?}");
        }
    }

    fn batch_of(samples: &[ImageSample]) -> Vec<&ImageSample> {
        // one sample of each class
        let a = samples.iter().find(|s| s.label == 0).unwrap();
        let b = samples.iter().find(|s| s.label == 1).unwrap();
        vec![a, b]
    }

    fn only(term: &str) -> LossWeights {
        let mut w = LossWeights {
            ce: 0.0,
            cluster: 0.0,
            proto: 0.0,
            mi: 0.0,
        };
        match term {
            "ce" => w.ce = 1.0,
            "cluster" => w.cluster = 1.0,
            "proto" => w.proto = 1.0,
            _ => w.mi = 1.0,
        }
        w
    }

    #[test]
    fn gradients_of_each_term_and_their_sum() {
        let samples = data(12, 0.5, 3);
        let mut cfg = tiny_config();
        cfg.clamp_mi = false;
        let mut st = tiny_state(cfg, &samples);
        // move q away from its initialization so the MI term has curvature
        let (zc, zs) = st.latents(&samples.iter().collect::<Vec<_>>()).unwrap();
        for _ in 0..5 {
            fit_q_step(&zc, &zs.clone().unwrap(), &mut st.q, 1e-2).unwrap();
        }
        let batch = batch_of(&samples);
        for term in ["ce", "cluster", "proto", "mi"] {
            grad_check(&st, &batch, only(term));
        }
        grad_check(
            &st,
            &batch,
            LossWeights {
                ce: 1.0,
                cluster: 0.3,
                proto: 0.7,
                mi: 0.5,
            },
        );
    }

    #[test]
    fn gradients_of_ablated_variants() {
        let samples = data(12, 0.5, 4);
        let batch = batch_of(&samples);
        for ab in [Ablation::NoDo, Ablation::SharedProto, Ablation::ErmBaseline] {
            let mut cfg = tiny_config();
            cfg.ablation = vec![ab];
            let st = tiny_state(cfg, &samples);
            let w = st.loss_weights();
            grad_check(&st, &batch, w);
        }
        let mut cfg = tiny_config();
        cfg.subsample_contexts = Some(2);
        cfg.nwgm_mode = crate::intervention::ContextMode::Geometric;
        let st = tiny_state(cfg, &samples);
        grad_check(&st, &batch, st.loss_weights());
    }

    #[test]
    fn weights_follow_ablation_flags() {
        let samples = data(6, 0.5, 1);
        let mut cfg = tiny_config();
        cfg.ablation = vec![Ablation::NoMi, Ablation::NoCluster];
        let st = tiny_state(cfg, &samples);
        let w = st.loss_weights();
        assert_eq!((w.mi, w.cluster, w.proto), (0.0, 0.0, 0.1));
    }

    #[test]
    fn zero_coefficients_reduce_to_cross_entropy() {
        let samples = data(6, 0.5, 2);
        let st = tiny_state(tiny_config(), &samples);
        let batch = batch_of(&samples);
        let full = st.total_loss(&batch, st.loss_weights()).unwrap();
        let ce_only = st.total_loss(&batch, only("ce")).unwrap();
        assert!((ce_only.total - full.ce).abs() < 1e-12);
        assert_eq!(ce_only.total, ce_only.ce);
        let none = LossWeights {
            ce: 0.0,
            ..only("cluster")
        };
        let none = LossWeights { cluster: 0.0, ..none };
        assert_eq!(st.total_loss(&batch, none).unwrap().total, 0.0);
    }

    #[test]
    fn confident_intervention_has_zero_loss() {
        let samples = data(6, 0.5, 2);
        let mut st = tiny_state(tiny_config(), &samples);
        // a fusion head that reads nothing and outputs a huge margin for
        // class 0 gives a one-hot prediction on class-0 samples
        for (name, t) in st.fusion.params.iter_mut() {
            *t = t.map(|_| 0.0);
            if name == "fusion.l1.bias" {
                t.data_mut()[0] = 800.0;
            }
        }
        let zero = samples.iter().filter(|s| s.label == 0).take(2).collect::<Vec<_>>();
        let l = st.total_loss(&zero, only("ce")).unwrap();
        assert_eq!(l.total, 0.0);
    }

    fn dot_col(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        (0..w.cols())
            .map(|j| (0..x.len()).map(|k| x[k] * w.at(k, j)).sum::<f64>() + b.data()[j])
            .collect()
    }

    #[test]
    fn objective_matches_straight_line_recomputation() {
        let samples = data(8, 0.5, 5);
        let mut cfg = tiny_config();
        cfg.clamp_mi = false;
        let mut st = tiny_state(cfg, &samples);
        let (zc_all, zs_all) = st.latents(&samples.iter().collect::<Vec<_>>()).unwrap();
        for _ in 0..3 {
            fit_q_step(&zc_all, zs_all.as_ref().unwrap(), &mut st.q, 1e-2).unwrap();
        }
        let batch = batch_of(&samples);
        // identity running statistics expose the raw head outputs, which
        // training standardizes with the batch moments
        let mut probe = st.encoder.clone();
        let d = st.config.latent_dim;
        for b in ["c", "s"] {
            probe.stats.insert(format!("{b}.norm.mean"), Tensor::zeros(&[d]));
            probe.stats.insert(format!("{b}.norm.var"), Tensor::full(&[d], 1.0 - 1e-5));
        }
        let x = to_batch(&batch);
        let batch_norm = |t: Tensor| {
            let mut out = t.clone();
            for j in 0..t.cols() {
                let mean = (t.at(0, j) + t.at(1, j)) / 2.0;
                let var = ((t.at(0, j) - mean).powi(2) + (t.at(1, j) - mean).powi(2)) / 2.0;
                for i in 0..2 {
                    out.row_mut(i)[j] = (t.at(i, j) - mean) / (var + 1e-5).sqrt();
                }
            }
            out
        };
        let zc = batch_norm(probe.encode_branch(&x, Branch::Causal).unwrap());
        let zs = batch_norm(probe.encode_branch(&x, Branch::Spurious).unwrap());
        let labels = [batch[0].label, batch[1].label];
        let cfg = st.config.clone();
        let n = 2usize;
        let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

        // cross-entropy of the averaged per-context softmax
        let fp = &st.fusion.params;
        let ps = &st.spurious.prototypes;
        let mut ce = 0.0;
        for i in 0..n {
            let mut avg = [0.0; 2];
            for m in 0..ps.rows() {
                let mut x = zc.row(i).to_vec();
                x.extend_from_slice(ps.row(m));
                let h: Vec<f64> = dot_col(&x, fp.get("fusion.l0.weight").unwrap(), fp.get("fusion.l0.bias").unwrap())
                    .into_iter()
                    .map(|v| v.max(0.0))
                    .collect();
                let o = dot_col(&h, fp.get("fusion.l1.weight").unwrap(), fp.get("fusion.l1.bias").unwrap());
                let mx = o[0].max(o[1]);
                let z = (o[0] - mx).exp() + (o[1] - mx).exp();
                for c in 0..2 {
                    avg[c] += (o[c] - mx).exp() / z / ps.rows() as f64;
                }
            }
            ce -= avg[labels[i]].ln() / n as f64;
        }

        // cluster: attraction minus tau times entropy of the mean assignment
        let mut attraction = 0.0;
        let mut abar = vec![0.0; ps.rows()];
        for i in 0..n {
            let ds: Vec<f64> = (0..ps.rows()).map(|m| d2(zs.row(i), ps.row(m))).collect();
            attraction += ds.iter().cloned().fold(f64::INFINITY, f64::min) / n as f64;
            let z: f64 = ds.iter().map(|d| (-d).exp()).sum();
            for m in 0..ps.rows() {
                abar[m] += (-ds[m]).exp() / z / n as f64;
            }
        }
        let entropy: f64 = -abar.iter().map(|a| a * a.ln()).sum::<f64>();
        let cluster = attraction - cfg.tau * entropy;

        // proto: own-class attraction plus hinge separation
        let pc = &st.causal.prototypes;
        let mut proto = 0.0;
        for i in 0..n {
            let mut own = f64::INFINITY;
            let mut other = f64::INFINITY;
            for k in 0..pc.rows() {
                let d = d2(zc.row(i), pc.row(k));
                if st.causal.class_of[k] == labels[i] {
                    own = own.min(d);
                } else {
                    other = other.min(d);
                }
            }
            proto += (own + (cfg.margin - other).max(0.0)) / n as f64;
        }

        // MI: contrastive log-ratio with the Gaussian conditional, on
        // batch z-scores of both latents
        let zscore = |t: &Tensor| {
            let mut out = t.clone();
            for d in 0..t.cols() {
                let mean = (t.at(0, d) + t.at(1, d)) / 2.0;
                let var = ((t.at(0, d) - mean).powi(2) + (t.at(1, d) - mean).powi(2)) / 2.0;
                for i in 0..2 {
                    out.row_mut(i)[d] = (t.at(i, d) - mean) / (var + 1e-8).sqrt();
                }
            }
            out
        };
        let (zc, zs) = (zscore(&zc), zscore(&zs));
        let qp = &st.q.params;
        let mut lmat = [[0.0; 2]; 2];
        for i in 0..n {
            let h: Vec<f64> = dot_col(zs.row(i), qp.get("q.trunk.weight").unwrap(), qp.get("q.trunk.bias").unwrap())
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let mu = dot_col(&h, qp.get("q.mu.weight").unwrap(), qp.get("q.mu.bias").unwrap());
            let lv: Vec<f64> = dot_col(&h, qp.get("q.logvar.weight").unwrap(), qp.get("q.logvar.bias").unwrap())
                .into_iter()
                .map(|v| v.clamp(-8.0, 8.0))
                .collect();
            for j in 0..n {
                lmat[i][j] = (0..cfg.latent_dim)
                    .map(|d| {
                        -0.5 * ((2.0 * std::f64::consts::PI).ln() + lv[d] + (zc.at(j, d) - mu[d]).powi(2) / lv[d].exp())
                    })
                    .sum();
            }
        }
        let mi = (0..n)
            .map(|i| lmat[i][i] - (lmat[i][0] + lmat[i][1]) / n as f64)
            .sum::<f64>()
            / n as f64;

        let got = st.total_loss(&batch, st.loss_weights()).unwrap();
        for (name, a, b) in [
            ("ce", got.ce, ce),
            ("cluster", got.cluster, cluster),
            ("proto", got.proto, proto),
            ("mi", got.mi, mi),
        ] {
            assert!((a - b).abs() < 1e-10, "{name}: {a} vs {b}");
        }
        let total = ce + cfg.lambda1 * cluster + cfg.lambda2 * proto + cfg.beta * mi;
        assert!((got.total - total).abs() < 1e-10);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let samples = data(8, 0.5, 6);
        let mut cfg = tiny_config();
        cfg.learning_rate = 0.0;
        cfg.q_learning_rate = Some(0.0);
        cfg.weight_decay = 0.0;
        cfg.select_best = false;
        let tr = Trainer::new(cfg, 2, &samples, &[]).unwrap();
        let before = tr.state.clone();
        let out = tr.run(|_| {}).unwrap();
        assert_eq!(out.state.encoder.params, before.encoder.params);
        assert_eq!(out.state.fusion.params, before.fusion.params);
        assert_eq!(out.state.q.params, before.q.params);
        assert_eq!(out.state.spurious.prototypes, before.spurious.prototypes);
        assert!(out.state.causal.is_projected());
    }

    #[test]
    fn fixed_seed_runs_are_identical() {
        let samples = data(10, 0.5, 7);
        let run = || {
            let mut cfg = tiny_config();
            cfg.epochs = 2;
            Trainer::new(cfg, 2, &samples, &samples[..4]).unwrap().run(|_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.log, b.log);
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn resume_from_checkpoint_matches_uninterrupted_step() {
        let samples = data(10, 0.5, 8);
        let mut cfg = tiny_config();
        cfg.epochs = 3;
        let mut straight = Trainer::new(cfg.clone(), 2, &samples, &[]).unwrap();
        for _ in 0..7 {
            straight.step().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save_checkpoint(&straight.state, &path).unwrap();
        let expected = straight.step().unwrap();

        let restored = load_checkpoint(&path).unwrap();
        let mut resumed = Trainer::resume(restored, &samples, &[]);
        let got = resumed.step().unwrap();
        assert_eq!(got, expected);
        assert_eq!(resumed.state, straight.state);
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, "{\"format\": 1}").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn divergence_guard_names_the_step() {
        let samples = data(6, 0.5, 9);
        let mut cfg = tiny_config();
        cfg.max_loss = -1.0;
        let mut tr = Trainer::new(cfg, 2, &samples, &[]).unwrap();
        assert!(matches!(tr.step(), Err(Error::Diverged { step: 0, .. })));
    }

    #[test]
    fn nan_term_is_attributed() {
        let samples = data(6, 0.5, 10);
        let mut st = tiny_state(tiny_config(), &samples);
        st.causal.prototypes.data_mut()[0] = f64::NAN;
        let err = st.total_loss(&batch_of(&samples), st.loss_weights()).unwrap_err();
        assert!(matches!(&err, Error::Numeric { term, .. } if term == "proto"), "{err}");
    }
}
