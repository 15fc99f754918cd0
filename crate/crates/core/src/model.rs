//! The full meta-learner: encoder, prior mask, prototype alignment,
//! hyper-correlation and decoder wired into one episode forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use symnet_tensor::{Real, Tape, Tensor, Var};

use crate::apa::{self, AlignmentParams, PrototypeBundle};
use crate::config::Config;
use crate::data::Episode;
use crate::encoder::{Encoder, FeaturePyramid, TextEmbeddings};
use crate::error::{invalid, Error, Result};
use crate::fusion::{self, FusionHead, LossTerms, PredictionSet};
use crate::mask::binarize_resized;
use crate::params::{Bound, ParamStore};
use crate::spm::{self, PriorMask};
use crate::tdc::{self, CorrelationStack, TopDownFuse};

/// Prior value used when the prior-mask module is ablated.
pub const UNIFORM_PRIOR: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct SymNet<T> {
    pub cfg: Config,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub align_query: AlignmentParams,
    pub align_support: AlignmentParams,
    pub tdc: TopDownFuse,
    pub head: FusionHead,
    pub text: TextEmbeddings<T>,
}

/// Everything one episode forward produces.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub preds: PredictionSet<Var>,
    pub prior: PriorMask<T>,
    /// Absent when alignment is ablated.
    pub bundle: Option<PrototypeBundle<Var>>,
    pub p_hybrid: Var,
    /// Absent when hyper-correlation is ablated.
    pub correlations: Option<CorrelationStack<T>>,
    pub guidance: Guidance<T>,
}

/// The tape-free inputs of each shot: its prior mask and correlation stack.
///
/// Both are computed from feature values, so they act as gradient stops.
/// Passing them back into [`SymNet::forward_guided`] replays a forward pass
/// with those inputs held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Guidance<T> {
    pub priors: Vec<PriorMask<T>>,
    pub correlations: Vec<Option<CorrelationStack<T>>>,
}

/// Outputs of one support shot.
struct Shot<T> {
    prior: PriorMask<T>,
    bundle: Option<PrototypeBundle<Var>>,
    p_s: Var,
    correlations: Option<CorrelationStack<T>>,
}

/// Inference result at image resolution.
#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub mask: Tensor<T>,
    pub prior: PriorMask<T>,
    pub final_logits: Tensor<T>,
}

pub fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class{i:02}")).collect()
}

impl<T: Real> SymNet<T> {
    /// Fresh model; the text table is drawn from the same seeded stream.
    pub fn init(cfg: &Config) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let text = TextEmbeddings::random(&class_names(cfg.n_classes), cfg.d_text, &mut rng);
        Self::with_text(cfg, text, &mut rng)
    }

    pub fn with_text(cfg: &Config, text: TextEmbeddings<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if text.dim() != cfg.d_text || text.len() < cfg.n_classes {
            return Err(Error::InvalidConfig(format!(
                "text table has {} rows of {} values, need {} rows of {}",
                text.len(),
                text.dim(),
                cfg.n_classes,
                cfg.d_text
            )));
        }
        let mut store = ParamStore::new();
        let encoder = Encoder::new(cfg, &mut store, rng);
        if cfg.freeze_backbone {
            for id in encoder.param_ids() {
                store.set_trainable(id, false);
            }
        }
        let c = cfg.proto_dim();
        let align = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str| {
            AlignmentParams::new(store, rng, name, cfg.c_mid, c, cfg.d_text, cfg.ffn_mult, cfg.d_scale)
        };
        let align_query = align(&mut store, rng, "align.query");
        let align_support = if cfg.share_align_params {
            align_query
        } else {
            align(&mut store, rng, "align.support")
        };
        let tdc = TopDownFuse::new(&mut store, rng, [cfg.n1, cfg.n2, cfg.n3], cfg.n_prime);
        let head = FusionHead::new(&mut store, rng, cfg.c_mid + c + 1 + cfg.n_prime, cfg.decoder_width);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            align_query,
            align_support,
            tdc,
            head,
            text,
        })
    }

    fn check_episode(&self, ep: &Episode<T>) -> Result<()> {
        if ep.supports.is_empty() {
            return invalid("episode has no support shots");
        }
        let s = self.cfg.image_size;
        let img_ok = |t: &Tensor<T>| t.shape() == [s, s, 3];
        let mask_ok = |t: &Tensor<T>| t.shape() == [s, s];
        if !img_ok(&ep.query_image) || ep.supports.iter().any(|sh| !img_ok(&sh.image) || !mask_ok(&sh.mask)) {
            return invalid(format!("episode images must be {s}x{s}x3 with {s}x{s} masks"));
        }
        for sh in &ep.supports {
            spm::check_binary_mask(&sh.mask)?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn shot(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        query: &FeaturePyramid<Var>,
        query_values: &FeaturePyramid<Tensor<T>>,
        image: &Tensor<T>,
        mask: &Tensor<T>,
        text: Var,
        fixed: Option<(&PriorMask<T>, &Option<CorrelationStack<T>>)>,
    ) -> Result<Shot<T>> {
        let cfg = &self.cfg;
        let support = self.encoder.encode(tape, bound, image)?;
        let (h, w, _) = query_values.high_feature().hwc()?;
        let (prior, correlations) = match fixed {
            Some((prior, corr)) => {
                if prior.size() != (h, w) {
                    return invalid(format!("guidance prior {:?} does not match the {h}x{w} grid", prior.size()));
                }
                (prior.clone(), corr.clone())
            }
            None => {
                let support_values = support.values(tape);
                let prior = if cfg.disable_spm {
                    PriorMask::uniform(h, w, T::of(UNIFORM_PRIOR))
                } else {
                    spm::prior_mask(
                        support_values.high_feature(),
                        query_values.high_feature(),
                        mask,
                        &cfg.windows(),
                        cfg.kernel,
                    )?
                };
                let correlations = if cfg.disable_tdc {
                    None
                } else {
                    Some(tdc::correlation_maps(&support_values, query_values, mask, cfg.corr_reduce)?)
                };
                (prior, correlations)
            }
        };
        let fs = *support.mid_feature();
        let fq = *query.mid_feature();
        if cfg.disable_apa {
            let p_s = apa::masked_average_prototype(tape, fs, mask)?;
            return Ok(Shot {
                prior,
                bundle: None,
                p_s,
                correlations,
            });
        }
        let pair = apa::align_branches(
            tape,
            bound,
            &self.align_query,
            &self.align_support,
            fq,
            &prior.map,
            fs,
            mask,
            text,
            cfg.tau1,
        )?;
        let p_hybrid = apa::hybrid_prototype(tape, pair.p_q_aug, pair.p_s_aug, cfg.alpha, cfg.beta)?;
        let (p_q_minus, p_q_plus) = apa::mine_query_triplet(tape, fq, &prior.map, cfg.tau2, cfg.tau3, cfg.tau4)?;
        let grid = binarize_resized(mask, (h, w))?;
        let (p_s_minus, p_s_plus) = apa::mine_support_triplet(tape, fs, &grid, pair.p_s_aug)?;
        Ok(Shot {
            prior,
            bundle: Some(PrototypeBundle {
                p_s: pair.p_s,
                p_q: pair.p_q,
                p_s_aug: pair.p_s_aug,
                p_q_aug: pair.p_q_aug,
                p_hybrid,
                p_q_plus,
                p_q_minus,
                p_s_plus,
                p_s_minus,
            }),
            p_s: pair.p_s,
            correlations,
        })
    }

    /// Forward pass over an episode; parameters must already be bound to `tape`.
    pub fn forward(&self, tape: &mut Tape<'_, T>, bound: &Bound, ep: &Episode<T>) -> Result<ForwardPass<T>> {
        self.forward_inner(tape, bound, ep, None)
    }

    /// Forward pass with each shot's prior and correlations taken from `guidance`.
    pub fn forward_guided(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        ep: &Episode<T>,
        guidance: &Guidance<T>,
    ) -> Result<ForwardPass<T>> {
        let k = ep.supports.len();
        if guidance.priors.len() != k || guidance.correlations.len() != k {
            return invalid(format!(
                "guidance covers {} priors and {} stacks for {k} shots",
                guidance.priors.len(),
                guidance.correlations.len()
            ));
        }
        self.forward_inner(tape, bound, ep, Some(guidance))
    }

    fn forward_inner(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        ep: &Episode<T>,
        guidance: Option<&Guidance<T>>,
    ) -> Result<ForwardPass<T>> {
        self.check_episode(ep)?;
        let text = tape.constant(self.text.embed(ep.class_id)?.clone())?;
        let query = self.encoder.encode(tape, bound, &ep.query_image)?;
        let query_values = query.values(tape);
        let shots = ep
            .supports
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let fixed = guidance.map(|g| (&g.priors[i], &g.correlations[i]));
                self.shot(tape, bound, &query, &query_values, &s.image, &s.mask, text, fixed)
            })
            .collect::<Result<Vec<_>>>()?;
        let guidance = Guidance {
            priors: shots.iter().map(|s| s.prior.clone()).collect(),
            correlations: shots.iter().map(|s| s.correlations.clone()).collect(),
        };

        let priors: Vec<&PriorMask<T>> = shots.iter().map(|s| &s.prior).collect();
        let prior = PriorMask::average(&priors)?;
        let bundles: Vec<&PrototypeBundle<Var>> = shots.iter().filter_map(|s| s.bundle.as_ref()).collect();
        let bundle = if bundles.is_empty() {
            None
        } else {
            Some(PrototypeBundle::average(tape, &bundles)?)
        };
        let p_hybrid = match &bundle {
            Some(b) => b.p_hybrid,
            None => {
                let ps: Vec<Var> = shots.iter().map(|s| s.p_s).collect();
                tape.average(&ps)?
            }
        };
        let stacks: Vec<&CorrelationStack<T>> = shots.iter().filter_map(|s| s.correlations.as_ref()).collect();
        let correlations = if stacks.is_empty() {
            None
        } else {
            Some(CorrelationStack::average(&stacks)?)
        };

        let (h, w) = prior.size();
        let hyper = match &correlations {
            Some(stack) => self.tdc.forward(tape, bound, stack)?,
            None => tape.constant(Tensor::zeros(&[h, w, self.cfg.n_prime]))?,
        };
        let size = (self.cfg.image_size, self.cfg.image_size);
        let preds = self
            .head
            .forward(tape, bound, *query.mid_feature(), &prior.map, p_hybrid, hyper, size)?;
        Ok(ForwardPass {
            preds,
            prior,
            bundle,
            p_hybrid,
            correlations,
            guidance,
        })
    }

    /// Forward pass plus the three loss terms against the query mask.
    pub fn losses(&self, tape: &mut Tape<'_, T>, bound: &Bound, ep: &Episode<T>) -> Result<(ForwardPass<T>, LossTerms)> {
        let pass = self.forward(tape, bound, ep)?;
        self.loss_terms(tape, pass, ep)
    }

    /// As [`Self::losses`], replaying fixed per-shot guidance.
    pub fn losses_guided(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        ep: &Episode<T>,
        guidance: &Guidance<T>,
    ) -> Result<(ForwardPass<T>, LossTerms)> {
        let pass = self.forward_guided(tape, bound, ep, guidance)?;
        self.loss_terms(tape, pass, ep)
    }

    fn loss_terms(&self, tape: &mut Tape<'_, T>, pass: ForwardPass<T>, ep: &Episode<T>) -> Result<(ForwardPass<T>, LossTerms)> {
        let (inter, final_seg) = fusion::segmentation_loss(tape, &pass.preds, &ep.query_mask)?;
        let co = match &pass.bundle {
            Some(b) => Some(apa::co_triplet_loss(tape, b)?),
            None => None,
        };
        let terms = fusion::total_loss(tape, inter, final_seg, co)?;
        Ok((pass, terms))
    }

    /// Gradient-free prediction.
    pub fn predict(&self, ep: &Episode<T>) -> Result<Prediction<T>> {
        let mut tape = Tape::no_grad();
        let bound = self.store.bind(&mut tape)?;
        let pass = self.forward(&mut tape, &bound, ep)?;
        let final_logits = tape.value(pass.preds.final_logits).clone();
        Ok(Prediction {
            mask: fusion::predicted_mask(&final_logits)?,
            prior: pass.prior,
            final_logits,
        })
    }
}
