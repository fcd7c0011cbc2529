//! Three-role optimization with per-term gradient routing.
//!
//! One combined SGD step applies:
//!   (a) demographic cross-entropy + AM-Softmax + distribution BCE, with
//!       gradients to the encoder and the respective heads (the BCE to
//!       the distribution head only, never into the encoder);
//!   (b) the weighted adversarial term, to the encoder only;
//!   (c) the weighted factorization term on the same shuffled batch, to
//!       the encoder only.
//! An alternating schedule that applies (a), (b), (c) as separate steps
//! is available behind a config switch.

use ndarray::{s, Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{DebfaceError, Result};
use crate::losses::{self, LossBreakdown, LossTerms, LossWeights};
use crate::netcore::{
    block_range, identity_cosines, identity_cosines_backward, renormalize_rows, AggregatorGrads,
    AggregatorParams, Attribute, DistrGrad, EncoderGrads, EncoderParams, HeadParams, NetConfig,
    ALL_ATTRIBUTES,
};
use crate::nn::{ConvGrad, Linear, LinearGrad};
use crate::rng;
use crate::synthgen::LabeledSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseface,
    Debface,
    Aggregator,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::Baseface => "baseface",
            Mode::Debface => "debface",
            Mode::Aggregator => "aggregator",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Mode {
    type Err = DebfaceError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseface" => Ok(Mode::Baseface),
            "debface" => Ok(Mode::Debface),
            "aggregator" => Ok(Mode::Aggregator),
            other => Err(DebfaceError::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// One optimizer step per minibatch with per-term gradient masking.
    Combined,
    /// Separate (a)/(b)/(c) steps per minibatch.
    Alternating,
}

/// Which blocks each classifier is adversarially fed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdversarialPairing {
    /// Every classifier sees all three non-corresponding blocks (12 pairs).
    Full,
    /// Each demographic classifier sees the identity block plus the
    /// cyclically-next demographic block; the identity classifier is
    /// excluded (6 pairs).
    TwoSummand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by
    /// `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub mode: Mode,
    pub schedule: Schedule,
    pub pairing: AdversarialPairing,
}

impl TrainConfig {
    pub fn desk_default(mode: Mode, seed: u64) -> Self {
        Self {
            epochs: 15,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.01,
            lr_drop_epochs: vec![8, 13],
            lr_drop_factor: 0.1,
            weights: LossWeights::default(),
            seed,
            mode,
            schedule: Schedule::Combined,
            pairing: AdversarialPairing::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(DebfaceError::Config("batch_size must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DebfaceError::Config(
                "learning_rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DebfaceError::Config("momentum must be in [0,1)".into()));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(DebfaceError::Config(
                "weight_decay must be nonnegative".into(),
            ));
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DebfaceError::Config(
                "lr_drop_epochs must be strictly increasing".into(),
            ));
        }
        self.weights.validate()?;
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|e| **e <= epoch).count();
        self.learning_rate * self.lr_drop_factor.powi(drops as i32)
    }
}

/// Full optimizer state: parameters, momentum buffers, counters, RNG.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: NetConfig,
    pub mode: Mode,
    pub encoder: EncoderParams,
    pub heads: HeadParams,
    pub aggregator: Option<AggregatorParams>,
    /// Maps raw dataset identity labels to contiguous class indices.
    pub id_classes: BTreeMap<usize, usize>,
    slots: Slots,
    pub epoch: usize,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

/// Momentum buffers, mirrored on the parameter containers.
#[derive(Debug, Clone)]
struct Slots {
    encoder: EncoderParams,
    heads: HeadParams,
}

fn zero_linear(l: &Linear) -> Linear {
    Linear::zeros(l.out_dim(), l.in_dim())
}

fn zero_encoder(e: &EncoderParams) -> EncoderParams {
    let mut z = e.clone();
    for c in &mut z.convs {
        c.w.fill(0.0);
        c.b.fill(0.0);
    }
    z.fc = zero_linear(&e.fc);
    z
}

fn zero_heads(h: &HeadParams) -> HeadParams {
    let mut z = h.clone();
    z.gender = zero_linear(&h.gender);
    z.age = zero_linear(&h.age);
    z.race = zero_linear(&h.race);
    z.identity.fill(0.0);
    z.distr.l1 = zero_linear(&h.distr.l1);
    z.distr.l2 = zero_linear(&h.distr.l2);
    z
}

fn zero_aggregator(a: &AggregatorParams) -> AggregatorParams {
    let mut z = a.clone();
    z.proj = zero_linear(&a.proj);
    for u in &mut z.units {
        u.l1 = zero_linear(&u.l1);
        u.l2 = zero_linear(&u.l2);
        u.prelu = 0.0;
    }
    z
}

impl TrainState {
    /// Fresh state for the given mode. The encoder has 4 blocks for
    /// debface and a single D-wide block for baseface, keeping AUC
    /// comparisons width-fair.
    pub fn init(
        net: &NetConfig,
        mode: Mode,
        seed: u64,
        id_classes: BTreeMap<usize, usize>,
    ) -> Self {
        let out_blocks = match mode {
            Mode::Debface => 4,
            Mode::Baseface => 1,
            Mode::Aggregator => 4,
        };
        let encoder = EncoderParams::init(net, out_blocks, seed);
        let heads = HeadParams::init(net, seed);
        Self {
            net: net.clone(),
            mode,
            slots: Slots {
                encoder: zero_encoder(&encoder),
                heads: zero_heads(&heads),
            },
            encoder,
            heads,
            aggregator: None,
            id_classes,
            epoch: 0,
            step: 0,
            rng: rng::stream(seed, "trainloop", &[]),
        }
    }

    pub fn block_dim(&self) -> usize {
        self.net.block_dim
    }

    /// Forward a batch of raw samples through the encoder (no caches).
    pub fn encode_samples(&self, samples: &[&LabeledSample]) -> Result<Array2<f64>> {
        let images = stack_images(samples)?;
        let (out, _) = self.encoder.forward_batch(&images)?;
        Ok(out)
    }
}

/// One minibatch with identity labels remapped to class indices.
pub struct Minibatch {
    pub images: Array4<f64>,
    pub identity: Vec<usize>,
    pub gender: Vec<usize>,
    pub age: Vec<usize>,
    pub race: Vec<usize>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.identity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identity.is_empty()
    }

    pub fn from_samples(
        samples: &[&LabeledSample],
        id_classes: &BTreeMap<usize, usize>,
    ) -> Result<Self> {
        let images = stack_images(samples)?;
        let mut identity = Vec::with_capacity(samples.len());
        for s in samples {
            let class = id_classes.get(&s.identity).ok_or_else(|| {
                DebfaceError::StateMismatch(format!("unknown training identity {}", s.identity))
            })?;
            identity.push(*class);
        }
        Ok(Self {
            images,
            identity,
            gender: samples.iter().map(|s| s.gender).collect(),
            age: samples.iter().map(|s| s.age_group).collect(),
            race: samples.iter().map(|s| s.race).collect(),
        })
    }

    fn labels_for(&self, attr: Attribute) -> &[usize] {
        match attr {
            Attribute::Gender => &self.gender,
            Attribute::Age => &self.age,
            Attribute::Race => &self.race,
            Attribute::Identity => &self.identity,
        }
    }
}

/// Stack f32 sample images into an f64 batch tensor.
pub fn stack_images(samples: &[&LabeledSample]) -> Result<Array4<f64>> {
    if samples.is_empty() {
        return Err(DebfaceError::EmptyInput("stack_images".into()));
    }
    let (c, h, w) = samples[0].image.dim();
    let mut images = Array4::zeros((samples.len(), c, h, w));
    for (i, s) in samples.iter().enumerate() {
        if s.image.dim() != (c, h, w) {
            return Err(DebfaceError::ShapeMismatch(
                "inconsistent image shapes in batch".into(),
            ));
        }
        images
            .slice_mut(s![i, .., .., ..])
            .assign(&s.image.mapv(|v| v as f64));
    }
    Ok(images)
}

/// Which loss terms contribute gradients; used by the alternating
/// schedule and by routing audits.
#[derive(Debug, Clone, Copy)]
pub struct TermMask {
    pub classification: bool,
    pub distr_bce: bool,
    pub adversarial: bool,
    pub factorization: bool,
}

impl TermMask {
    pub const ALL: TermMask = TermMask {
        classification: true,
        distr_bce: true,
        adversarial: true,
        factorization: true,
    };
}

/// Gradients for every head tensor.
pub struct HeadGrads {
    pub gender: LinearGrad,
    pub age: LinearGrad,
    pub race: LinearGrad,
    pub identity: Array2<f64>,
    pub distr: DistrGrad,
}

impl HeadGrads {
    fn zeros(heads: &HeadParams) -> Self {
        Self {
            gender: heads.gender.zero_grad(),
            age: heads.age.zero_grad(),
            race: heads.race.zero_grad(),
            identity: Array2::zeros(heads.identity.raw_dim()),
            distr: DistrGrad {
                l1: heads.distr.l1.zero_grad(),
                l2: heads.distr.l2.zero_grad(),
            },
        }
    }
}

/// The (classifier, block) pairs of the adversarial term.
pub fn adversarial_pairs(pairing: AdversarialPairing) -> Vec<(Attribute, Attribute)> {
    match pairing {
        AdversarialPairing::Full => {
            let mut pairs = Vec::new();
            for cl in ALL_ATTRIBUTES {
                for bl in ALL_ATTRIBUTES {
                    if cl != bl {
                        pairs.push((cl, bl));
                    }
                }
            }
            pairs
        }
        AdversarialPairing::TwoSummand => vec![
            (Attribute::Gender, Attribute::Age),
            (Attribute::Gender, Attribute::Identity),
            (Attribute::Age, Attribute::Race),
            (Attribute::Age, Attribute::Identity),
            (Attribute::Race, Attribute::Gender),
            (Attribute::Race, Attribute::Identity),
        ],
    }
}

/// Loss terms and routed gradients of one debface minibatch.
///
/// `d_emb` routing: classification contributes through head weights
/// (heads also get their own gradients); the adversarial and
/// factorization terms contribute lambda/nu-weighted gradients through
/// constant heads; the distribution BCE contributes to the distribution
/// head only.
pub fn compute_debface_grads(
    encoder: &EncoderParams,
    heads: &HeadParams,
    weights: &LossWeights,
    pairing: AdversarialPairing,
    batch: &Minibatch,
    shuffle_seed: u64,
    mask: TermMask,
) -> Result<(LossTerms, EncoderGrads, HeadGrads)> {
    let n = batch.len();
    let d = heads.gender.in_dim();
    let inv_n = 1.0 / n as f64;
    let (out, cache) = encoder.forward_batch(&batch.images)?;
    if out.ncols() != 4 * d {
        return Err(DebfaceError::StateMismatch(
            "debface step requires a 4-block encoder".into(),
        ));
    }
    let mut d_out: Array2<f64> = Array2::zeros(out.raw_dim());
    let mut head_grads = HeadGrads::zeros(heads);
    let mut terms = LossTerms::default();

    // Skip zero-weighted terms entirely so a lambda = nu = 0 run is
    // bit-identical to a plain multi-task step.
    let do_adv = mask.adversarial && weights.lambda_adv > 0.0;
    let do_fact = mask.factorization && weights.nu_fact > 0.0;

    if mask.classification {
        // Demographic cross-entropy on the corresponding blocks.
        for attr in [Attribute::Gender, Attribute::Age, Attribute::Race] {
            let lin = heads.demo_head(attr).unwrap();
            let range = block_range(attr, d);
            let block = out.slice(s![.., range.clone()]);
            let logits = lin.forward(&block);
            let mut d_logits = Array2::zeros(logits.raw_dim());
            let labels = batch.labels_for(attr);
            for i in 0..n {
                let (l, g) = losses::cross_entropy_with_grad(&logits.row(i), labels[i])?;
                terms.demo_ce += l * inv_n;
                d_logits.row_mut(i).assign(&(g * inv_n));
            }
            let (lg, d_block) = lin.backward(&block, &d_logits.view());
            match attr {
                Attribute::Gender => accumulate_linear(&mut head_grads.gender, &lg),
                Attribute::Age => accumulate_linear(&mut head_grads.age, &lg),
                Attribute::Race => accumulate_linear(&mut head_grads.race, &lg),
                Attribute::Identity => unreachable!(),
            }
            let mut dst = d_out.slice_mut(s![.., range]);
            dst += &d_block;
        }

        // AM-Softmax on the identity block.
        let range = block_range(Attribute::Identity, d);
        let block = out.slice(s![.., range.clone()]);
        let cosines = identity_cosines(&heads.identity.view(), &block)?;
        let mut d_cos = Array2::zeros(cosines.raw_dim());
        for i in 0..n {
            let (l, g) = losses::am_softmax_with_grad(
                &cosines.row(i),
                batch.identity[i],
                weights.am_scale,
                weights.am_margin,
            )?;
            terms.id_am += l * inv_n;
            d_cos.row_mut(i).assign(&(g * inv_n));
        }
        let (d_block, d_w) =
            identity_cosines_backward(&heads.identity.view(), &block, &d_cos.view(), true, true);
        head_grads.identity += &d_w.unwrap();
        let mut dst = d_out.slice_mut(s![.., range]);
        dst += &d_block.unwrap();
    }

    // Adversarial term: uniform-target losses through constant heads.
    if do_adv {
        for (classifier, block_attr) in adversarial_pairs(pairing) {
            let range = block_range(block_attr, d);
            let block = out.slice(s![.., range.clone()]);
            match heads.demo_head(classifier) {
                Some(lin) => {
                    let logits = lin.forward(&block);
                    let mut d_logits = Array2::zeros(logits.raw_dim());
                    for i in 0..n {
                        let (l, g) = losses::uniform_adversarial_loss_with_grad(&logits.row(i))?;
                        terms.adv += l * inv_n;
                        d_logits.row_mut(i).assign(&(g * inv_n));
                    }
                    let d_block = lin.backward_input(&d_logits.view());
                    let mut dst = d_out.slice_mut(s![.., range]);
                    dst += &d_block.mapv(|v| v * weights.lambda_adv);
                }
                None => {
                    let cosines = identity_cosines(&heads.identity.view(), &block)?;
                    let mut d_cos = Array2::zeros(cosines.raw_dim());
                    for i in 0..n {
                        let (l, g) = losses::uniform_adversarial_loss_with_grad(&cosines.row(i))?;
                        terms.adv += l * inv_n;
                        d_cos.row_mut(i).assign(&(g * inv_n));
                    }
                    let (d_block, _) = identity_cosines_backward(
                        &heads.identity.view(),
                        &block,
                        &d_cos.view(),
                        true,
                        false,
                    );
                    let mut dst = d_out.slice_mut(s![.., range]);
                    dst += &d_block.unwrap().mapv(|v| v * weights.lambda_adv);
                }
            }
        }
    }

    // Shuffle-product batch shared by the distribution BCE and the
    // factorization term.
    if mask.distr_bce || do_fact {
        let perms = losses::shuffle_permutations(n, shuffle_seed);
        let mut product = Array2::zeros(out.raw_dim());
        for (b, attr) in ALL_ATTRIBUTES.iter().enumerate() {
            let range = block_range(*attr, d);
            for i in 0..n {
                let src = out.slice(s![perms[b][i], range.clone()]);
                product.slice_mut(s![i, range.clone()]).assign(&src);
            }
        }
        let (logits_joint, cache_joint) = heads.distr.forward_batch(&out.view())?;
        let (logits_product, cache_product) = heads.distr.forward_batch(&product.view())?;

        if mask.distr_bce {
            let (bce, g_joint, g_product) =
                losses::distribution_loss_with_grad(&logits_joint.view(), &logits_product.view())?;
            terms.distr_bce = bce;
            // Head gradients only; the embeddings are detached here.
            let (gj, _) = heads.distr.backward(&cache_joint, &g_joint.view());
            let (gp, _) = heads.distr.backward(&cache_product, &g_product.view());
            accumulate_linear(&mut head_grads.distr.l1, &gj.l1);
            accumulate_linear(&mut head_grads.distr.l2, &gj.l2);
            accumulate_linear(&mut head_grads.distr.l1, &gp.l1);
            accumulate_linear(&mut head_grads.distr.l2, &gp.l2);
        }

        if do_fact {
            let mut d_logits = Array2::zeros(logits_product.raw_dim());
            for i in 0..n {
                let (l, g) = losses::factorization_loss_with_grad(&logits_product.row(i))?;
                terms.fact += l * inv_n;
                d_logits.row_mut(i).assign(&(g * inv_n));
            }
            // Through the constant distribution head, then undo the
            // per-block permutations.
            let d_product = heads.distr.backward_input(&cache_product, &d_logits.view());
            for (b, attr) in ALL_ATTRIBUTES.iter().enumerate() {
                let range = block_range(*attr, d);
                for i in 0..n {
                    let src = d_product.slice(s![i, range.clone()]);
                    let mut dst = d_out.slice_mut(s![perms[b][i], range.clone()]);
                    dst += &src.mapv(|v| v * weights.nu_fact);
                }
            }
        }
    }

    for (name, v) in [
        ("demo_ce", terms.demo_ce),
        ("id_am", terms.id_am),
        ("distr_bce", terms.distr_bce),
        ("adv", terms.adv),
        ("fact", terms.fact),
    ] {
        if !v.is_finite() {
            return Err(DebfaceError::NonFinite { term: name.into() });
        }
    }

    let enc_grads = encoder.backward(&cache, &d_out.view());
    Ok((terms, enc_grads, head_grads))
}

fn accumulate_linear(acc: &mut LinearGrad, g: &LinearGrad) {
    acc.w += &g.w;
    acc.b += &g.b;
}

// ---------------------------------------------------------------------
// SGD with momentum and weight decay
// ---------------------------------------------------------------------

fn sgd<D: ndarray::Dimension>(
    p: &mut ndarray::Array<f64, D>,
    g: &ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    lr: f64,
    momentum: f64,
    wd: f64,
) {
    azip_update(p, g, v, lr, momentum, wd);
}

fn azip_update<D: ndarray::Dimension>(
    p: &mut ndarray::Array<f64, D>,
    g: &ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    lr: f64,
    momentum: f64,
    wd: f64,
) {
    ndarray::Zip::from(p).and(g).and(v).for_each(|p, g, v| {
        *v = momentum * *v + g + wd * *p;
        *p -= lr * *v;
    });
}

fn sgd_linear(p: &mut Linear, g: &LinearGrad, v: &mut Linear, lr: f64, mom: f64, wd: f64) {
    sgd(&mut p.w, &g.w, &mut v.w, lr, mom, wd);
    sgd(&mut p.b, &g.b, &mut v.b, lr, mom, wd);
}

fn sgd_encoder(
    p: &mut EncoderParams,
    g: &EncoderGrads,
    v: &mut EncoderParams,
    lr: f64,
    mom: f64,
    wd: f64,
) {
    for ((pc, gc), vc) in p.convs.iter_mut().zip(&g.convs).zip(&mut v.convs) {
        sgd_conv(pc, gc, vc, lr, mom, wd);
    }
    sgd_linear(&mut p.fc, &g.fc, &mut v.fc, lr, mom, wd);
}

fn sgd_conv(
    p: &mut crate::nn::ConvLayer,
    g: &ConvGrad,
    v: &mut crate::nn::ConvLayer,
    lr: f64,
    mom: f64,
    wd: f64,
) {
    sgd(&mut p.w, &g.w, &mut v.w, lr, mom, wd);
    sgd(&mut p.b, &g.b, &mut v.b, lr, mom, wd);
}

/// Which parameter groups an SGD application may touch.
#[derive(Debug, Clone, Copy)]
struct UpdateMask {
    encoder: bool,
    demo_heads: bool,
    identity_head: bool,
    distr_head: bool,
}

impl UpdateMask {
    const ALL: UpdateMask = UpdateMask {
        encoder: true,
        demo_heads: true,
        identity_head: true,
        distr_head: true,
    };
    const ENCODER_ONLY: UpdateMask = UpdateMask {
        encoder: true,
        demo_heads: false,
        identity_head: false,
        distr_head: false,
    };
}

fn apply_update(
    state: &mut TrainState,
    enc_grads: &EncoderGrads,
    head_grads: &HeadGrads,
    lr: f64,
    mom: f64,
    wd: f64,
    which: UpdateMask,
) {
    if which.encoder {
        sgd_encoder(
            &mut state.encoder,
            enc_grads,
            &mut state.slots.encoder,
            lr,
            mom,
            wd,
        );
    }
    if which.demo_heads {
        sgd_linear(
            &mut state.heads.gender,
            &head_grads.gender,
            &mut state.slots.heads.gender,
            lr,
            mom,
            wd,
        );
        sgd_linear(
            &mut state.heads.age,
            &head_grads.age,
            &mut state.slots.heads.age,
            lr,
            mom,
            wd,
        );
        sgd_linear(
            &mut state.heads.race,
            &head_grads.race,
            &mut state.slots.heads.race,
            lr,
            mom,
            wd,
        );
    }
    if which.identity_head {
        sgd(
            &mut state.heads.identity,
            &head_grads.identity,
            &mut state.slots.heads.identity,
            lr,
            mom,
            wd,
        );
        // Projection: the cosine form requires unit class vectors.
        renormalize_rows(&mut state.heads.identity);
    }
    if which.distr_head {
        sgd_linear(
            &mut state.heads.distr.l1,
            &head_grads.distr.l1,
            &mut state.slots.heads.distr.l1,
            lr,
            mom,
            wd,
        );
        sgd_linear(
            &mut state.heads.distr.l2,
            &head_grads.distr.l2,
            &mut state.slots.heads.distr.l2,
            lr,
            mom,
            wd,
        );
    }
}

fn check_finite_state(state: &TrainState) -> Result<()> {
    let finite2 = |a: &Array2<f64>| a.iter().all(|v| v.is_finite());
    let finite1 = |a: &Array1<f64>| a.iter().all(|v| v.is_finite());
    let ok = state
        .encoder
        .convs
        .iter()
        .all(|c| finite2(&c.w) && finite1(&c.b))
        && finite2(&state.encoder.fc.w)
        && finite1(&state.encoder.fc.b)
        && finite2(&state.heads.identity);
    if !ok {
        return Err(DebfaceError::NonFinite {
            term: "parameters".into(),
        });
    }
    Ok(())
}

/// One optimizer step of the joint objective with per-term routing.
pub fn debface_step(
    state: &mut TrainState,
    config: &TrainConfig,
    batch: &Minibatch,
    lr: f64,
) -> Result<LossBreakdown> {
    if batch.len() < 2 {
        return Err(DebfaceError::InvalidSpec(
            "minibatch size must be >= 2".into(),
        ));
    }
    let shuffle_seed: u64 = state.rng.random();
    let (mom, wd) = (config.momentum, config.weight_decay);
    let breakdown = match config.schedule {
        Schedule::Combined => {
            let (terms, eg, hg) = compute_debface_grads(
                &state.encoder,
                &state.heads,
                &config.weights,
                config.pairing,
                batch,
                shuffle_seed,
                TermMask::ALL,
            )?;
            apply_update(state, &eg, &hg, lr, mom, wd, UpdateMask::ALL);
            losses::joint_loss(&terms, &config.weights)?
        }
        Schedule::Alternating => {
            // (a) classification + distribution BCE.
            let (mut terms, eg, hg) = compute_debface_grads(
                &state.encoder,
                &state.heads,
                &config.weights,
                config.pairing,
                batch,
                shuffle_seed,
                TermMask {
                    classification: true,
                    distr_bce: true,
                    adversarial: false,
                    factorization: false,
                },
            )?;
            apply_update(state, &eg, &hg, lr, mom, wd, UpdateMask::ALL);
            // (b) adversarial, encoder only.
            let (t_adv, eg, hg) = compute_debface_grads(
                &state.encoder,
                &state.heads,
                &config.weights,
                config.pairing,
                batch,
                shuffle_seed,
                TermMask {
                    classification: false,
                    distr_bce: false,
                    adversarial: true,
                    factorization: false,
                },
            )?;
            apply_update(state, &eg, &hg, lr, mom, wd, UpdateMask::ENCODER_ONLY);
            // (c) factorization, encoder only.
            let (t_fact, eg, hg) = compute_debface_grads(
                &state.encoder,
                &state.heads,
                &config.weights,
                config.pairing,
                batch,
                shuffle_seed,
                TermMask {
                    classification: false,
                    distr_bce: false,
                    adversarial: false,
                    factorization: true,
                },
            )?;
            apply_update(state, &eg, &hg, lr, mom, wd, UpdateMask::ENCODER_ONLY);
            terms.adv = t_adv.adv;
            terms.fact = t_fact.fact;
            losses::joint_loss(&terms, &config.weights)?
        }
    };
    check_finite_state(state)?;
    state.step += 1;
    Ok(breakdown)
}

/// One baseline step: AM-Softmax on the single D-wide embedding.
pub fn baseface_step(
    state: &mut TrainState,
    config: &TrainConfig,
    batch: &Minibatch,
    lr: f64,
) -> Result<LossBreakdown> {
    if batch.len() < 2 {
        return Err(DebfaceError::InvalidSpec(
            "minibatch size must be >= 2".into(),
        ));
    }
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let (out, cache) = state.encoder.forward_batch(&batch.images)?;
    let cosines = identity_cosines(&state.heads.identity.view(), &out.view())?;
    let mut d_cos = Array2::zeros(cosines.raw_dim());
    let mut id_am = 0.0;
    for i in 0..n {
        let (l, g) = losses::am_softmax_with_grad(
            &cosines.row(i),
            batch.identity[i],
            config.weights.am_scale,
            config.weights.am_margin,
        )?;
        id_am += l * inv_n;
        d_cos.row_mut(i).assign(&(g * inv_n));
    }
    if !id_am.is_finite() {
        return Err(DebfaceError::NonFinite {
            term: "id_am".into(),
        });
    }
    let (d_out, d_w) = identity_cosines_backward(
        &state.heads.identity.view(),
        &out.view(),
        &d_cos.view(),
        true,
        true,
    );
    let eg = state.encoder.backward(&cache, &d_out.unwrap().view());
    let mut hg = HeadGrads::zeros(&state.heads);
    hg.identity = d_w.unwrap();
    apply_update(
        state,
        &eg,
        &hg,
        lr,
        config.momentum,
        config.weight_decay,
        UpdateMask {
            encoder: true,
            demo_heads: false,
            identity_head: true,
            distr_head: false,
        },
    );
    check_finite_state(state)?;
    state.step += 1;
    Ok(LossBreakdown {
        demo_ce: 0.0,
        id_am,
        distr_bce: 0.0,
        adv: 0.0,
        fact: 0.0,
        total: id_am,
    })
}

/// Per-epoch mean losses; one line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub demo_ce: f64,
    pub id_am: f64,
    pub distr_bce: f64,
    pub adv: f64,
    pub fact: f64,
    pub total: f64,
}

/// Contiguous class indices for the identities present in a dataset.
pub fn identity_class_map(dataset: &[LabeledSample]) -> BTreeMap<usize, usize> {
    let ids: std::collections::BTreeSet<usize> = dataset.iter().map(|s| s.identity).collect();
    ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
}

/// Train a baseface or debface model on the given (training) samples.
pub fn train(
    config: &TrainConfig,
    net: &NetConfig,
    dataset: &[LabeledSample],
) -> Result<(TrainState, Vec<EpochRecord>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(DebfaceError::EmptyInput("train dataset".into()));
    }
    if config.mode == Mode::Aggregator {
        return Err(DebfaceError::Config(
            "aggregator mode requires train_aggregator with a frozen debface state".into(),
        ));
    }
    let id_classes = identity_class_map(dataset);
    let mut net = net.clone();
    net.num_identities = id_classes.len();
    let mut state = TrainState::init(&net, config.mode, config.seed, id_classes);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        state.epoch = epoch;
        let lr = config.lr_at_epoch(epoch);
        let mut shuffle_rng = rng::stream(config.seed, "epoch-shuffle", &[epoch as u64]);
        let order = rng::permutation(&mut shuffle_rng, dataset.len());
        let mut sums = LossTerms::default();
        let mut total_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let samples: Vec<&LabeledSample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let batch = Minibatch::from_samples(&samples, &state.id_classes)?;
            let b = match config.mode {
                Mode::Baseface => baseface_step(&mut state, config, &batch, lr)?,
                Mode::Debface => debface_step(&mut state, config, &batch, lr)?,
                Mode::Aggregator => unreachable!(),
            };
            sums.demo_ce += b.demo_ce;
            sums.id_am += b.id_am;
            sums.distr_bce += b.distr_bce;
            sums.adv += b.adv;
            sums.fact += b.fact;
            total_sum += b.total;
            steps += 1;
        }
        let inv = 1.0 / steps.max(1) as f64;
        history.push(EpochRecord {
            epoch,
            lr,
            demo_ce: sums.demo_ce * inv,
            id_am: sums.id_am * inv,
            distr_bce: sums.distr_bce * inv,
            adv: sums.adv * inv,
            fact: sums.fact * inv,
            total: total_sum * inv,
        });
    }
    Ok((state, history))
}

/// Per-epoch mean triplet loss of aggregator training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggEpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub triplet: f64,
}

/// Train the feature aggregator on top of a frozen debface state.
/// Batches hold several images of each sampled identity so batch-hard
/// mining always finds positives.
pub fn train_aggregator(
    config: &TrainConfig,
    frozen: &TrainState,
    dataset: &[LabeledSample],
) -> Result<(AggregatorParams, Vec<AggEpochRecord>)> {
    config.validate()?;
    if frozen.mode != Mode::Debface {
        return Err(DebfaceError::StateMismatch(
            "train_aggregator requires a trained debface state".into(),
        ));
    }
    let d = frozen.block_dim();
    // Identities with at least 2 images.
    let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.iter().enumerate() {
        by_identity.entry(s.identity).or_default().push(i);
    }
    by_identity.retain(|_, v| v.len() >= 2);
    if by_identity.len() < 2 {
        return Err(DebfaceError::InvalidSpec(
            "aggregator training needs >= 2 identities with >= 2 images each".into(),
        ));
    }
    let identities: Vec<usize> = by_identity.keys().cloned().collect();
    const IMAGES_PER_IDENTITY: usize = 4;
    let ids_per_batch = (config.batch_size / IMAGES_PER_IDENTITY).max(2);

    let mut agg = AggregatorParams::init(d, config.seed);
    let mut slots = zero_aggregator(&agg);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at_epoch(epoch);
        let mut erng = rng::stream(config.seed, "agg-epoch", &[epoch as u64]);
        let order = rng::permutation(&mut erng, identities.len());
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for group in order.chunks(ids_per_batch) {
            if group.len() < 2 {
                continue;
            }
            let mut samples = Vec::new();
            let mut labels = Vec::new();
            for &gi in group {
                let id = identities[gi];
                let idxs = &by_identity[&id];
                let mut srng = rng::stream(config.seed, "agg-sample", &[epoch as u64, id as u64]);
                let perm = rng::permutation(&mut srng, idxs.len());
                for &p in perm.iter().take(IMAGES_PER_IDENTITY.min(idxs.len())) {
                    samples.push(&dataset[idxs[p]]);
                    labels.push(id);
                }
            }
            let images = stack_images(&samples)?;
            let (flat, _) = frozen.encoder.forward_batch(&images)?;
            let input = crate::netcore::aggregator_input(&flat.view(), d);
            let (demoid, cache) = agg.forward_batch(&input.view())?;
            // Mine triplets on unit-norm embeddings so distances stay
            // bounded; verification scoring is cosine and unaffected.
            let (normed, norms) = normalize_rows_with_norms(&demoid)?;
            let (loss, d_normed) = losses::hard_triplet_loss_with_grad(
                &normed.view(),
                &labels,
                config.weights.triplet_margin,
            )?;
            let d_demoid = normalize_rows_backward(&normed, &norms, &d_normed);
            if !loss.is_finite() {
                return Err(DebfaceError::NonFinite {
                    term: "triplet".into(),
                });
            }
            let grads = agg.backward(&cache, &d_demoid.view());
            apply_aggregator_update(
                &mut agg,
                &grads,
                &mut slots,
                lr,
                config.momentum,
                config.weight_decay,
            );
            loss_sum += loss;
            steps += 1;
        }
        history.push(AggEpochRecord {
            epoch,
            lr,
            triplet: loss_sum / steps.max(1) as f64,
        });
    }
    Ok((agg, history))
}

fn normalize_rows_with_norms(x: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut y = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in y.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 {
            return Err(DebfaceError::ZeroNorm("aggregator output row".into()));
        }
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    Ok((y, norms))
}

fn normalize_rows_backward(y: &Array2<f64>, norms: &[f64], d_y: &Array2<f64>) -> Array2<f64> {
    let mut d_x = Array2::zeros(y.raw_dim());
    for i in 0..y.nrows() {
        let yi = y.row(i);
        let gi = d_y.row(i);
        let dot = gi.dot(&yi);
        let mut dst = d_x.row_mut(i);
        ndarray::Zip::from(&mut dst)
            .and(&gi)
            .and(&yi)
            .for_each(|d, &g, &yv| {
                *d = (g - dot * yv) / norms[i];
            });
    }
    d_x
}

fn apply_aggregator_update(
    agg: &mut AggregatorParams,
    grads: &AggregatorGrads,
    slots: &mut AggregatorParams,
    lr: f64,
    mom: f64,
    wd: f64,
) {
    sgd_linear(&mut agg.proj, &grads.proj, &mut slots.proj, lr, mom, wd);
    for ((u, g), v) in agg.units.iter_mut().zip(&grads.units).zip(&mut slots.units) {
        sgd_linear(&mut u.l1, &g.l1, &mut v.l1, lr, mom, wd);
        sgd_linear(&mut u.l2, &g.l2, &mut v.l2, lr, mom, wd);
        v.prelu = mom * v.prelu + g.prelu + wd * u.prelu;
        u.prelu -= lr * v.prelu;
    }
}

/// Maximum deviation of identity-head row norms from 1.
pub fn identity_norm_deviation(state: &TrainState) -> f64 {
    state
        .heads
        .identity
        .axis_iter(Axis(0))
        .map(|row| (row.dot(&row).sqrt() - 1.0).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{make_dataset, uniform_weights, DatasetSpec};

    fn tiny_dataset() -> Vec<LabeledSample> {
        let spec = DatasetSpec {
            image_height: 16,
            image_width: 16,
            channels: 3,
            num_identities: 8,
            images_per_identity: 4,
            gender_cardinality: 2,
            age_cardinality: 2,
            race_cardinality: 2,
            cohort_weights: uniform_weights(2, 2, 2),
            noise_sigma: 0.1,
            seed: 11,
        };
        make_dataset(&spec).unwrap()
    }

    fn tiny_net() -> NetConfig {
        NetConfig {
            in_channels: 3,
            in_height: 16,
            in_width: 16,
            block_dim: 8,
            conv_channels: vec![4, 8],
            pool: crate::netcore::PoolKind::Flatten,
            distr_hidden: 8,
            k_gender: 2,
            k_age: 2,
            k_race: 2,
            num_identities: 8,
        }
    }

    fn tiny_config(mode: Mode) -> TrainConfig {
        let mut c = TrainConfig::desk_default(mode, 5);
        c.epochs = 2;
        c.batch_size = 8;
        c.learning_rate = 0.01;
        c.lr_drop_epochs = vec![];
        c.weights.am_scale = 8.0;
        c.weights.am_margin = 0.2;
        c
    }

    fn first_batch(ds: &[LabeledSample], n: usize) -> Minibatch {
        let map = identity_class_map(ds);
        let samples: Vec<&LabeledSample> = ds.iter().take(n).collect();
        Minibatch::from_samples(&samples, &map).unwrap()
    }

    #[test]
    fn lambda_nu_sensitivity_sweep_stays_finite_and_matters() {
        // Sweep the adversarial and factorization weights over the
        // documented grid. Every run must stay finite, report an exact
        // weighted total, and the weight must actually influence the
        // learned encoder.
        let ds = tiny_dataset();
        let mut finals = Vec::new();
        for w in [0.0, 0.01, 0.1, 1.0] {
            let mut cfg = tiny_config(Mode::Debface);
            cfg.weights.lambda_adv = w;
            cfg.weights.nu_fact = w;
            let (state, history) = train(&cfg, &tiny_net(), &ds).unwrap();
            let last = history.last().unwrap();
            for v in [
                last.demo_ce,
                last.id_am,
                last.distr_bce,
                last.adv,
                last.fact,
                last.total,
            ] {
                assert!(v.is_finite());
            }
            let weighted =
                last.demo_ce + last.id_am + last.distr_bce + w * last.adv + w * last.fact;
            assert!((last.total - weighted).abs() < 1e-9);
            finals.push(state.encoder.fc.w[[0, 0]]);
        }
        for pair in finals.windows(2) {
            assert_ne!(pair[0], pair[1], "weight change must alter training");
        }
    }

    #[test]
    fn zero_epochs_returns_initial_state_and_empty_history() {
        let ds = tiny_dataset();
        let mut cfg = tiny_config(Mode::Debface);
        cfg.epochs = 0;
        cfg.lr_drop_epochs = vec![];
        let (state, history) = train(&cfg, &tiny_net(), &ds).unwrap();
        assert!(history.is_empty());
        let fresh = TrainState::init(
            &state.net,
            Mode::Debface,
            cfg.seed,
            state.id_classes.clone(),
        );
        assert_eq!(state.encoder, fresh.encoder);
        assert_eq!(state.heads, fresh.heads);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset();
        let mut cfg = tiny_config(Mode::Debface);
        cfg.lr_drop_epochs = vec![1];
        let (s1, h1) = train(&cfg, &tiny_net(), &ds).unwrap();
        let (s2, h2) = train(&cfg, &tiny_net(), &ds).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(s1.encoder, s2.encoder);
        assert_eq!(s1.heads, s2.heads);
    }

    #[test]
    fn breakdown_total_is_the_weighted_term_sum() {
        let ds = tiny_dataset();
        let mut cfg = tiny_config(Mode::Debface);
        cfg.epochs = 1;
        cfg.lr_drop_epochs = vec![];
        let (_, history) = train(&cfg, &tiny_net(), &ds).unwrap();
        for r in &history {
            let expect = r.demo_ce
                + r.id_am
                + r.distr_bce
                + cfg.weights.lambda_adv * r.adv
                + cfg.weights.nu_fact * r.fact;
            assert!((r.total - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_head_stays_unit_norm() {
        let ds = tiny_dataset();
        let mut cfg = tiny_config(Mode::Debface);
        cfg.lr_drop_epochs = vec![];
        let (state, _) = train(&cfg, &tiny_net(), &ds).unwrap();
        assert!(identity_norm_deviation(&state) < 1e-6);
    }

    #[test]
    fn zero_lambda_nu_step_matches_plain_multitask_step_bitwise() {
        let ds = tiny_dataset();
        let net = tiny_net();
        let mut cfg = tiny_config(Mode::Debface);
        cfg.weights.lambda_adv = 0.0;
        cfg.weights.nu_fact = 0.0;
        cfg.lr_drop_epochs = vec![];
        let map = identity_class_map(&ds);
        let batch = first_batch(&ds, 8);

        let mut s1 = TrainState::init(&net, Mode::Debface, cfg.seed, map.clone());
        debface_step(&mut s1, &cfg, &batch, 0.01).unwrap();

        // Plain multi-task: classification + distribution BCE only.
        let mut s2 = TrainState::init(&net, Mode::Debface, cfg.seed, map);
        let shuffle_seed: u64 = s2.rng.random();
        let (_, eg, hg) = compute_debface_grads(
            &s2.encoder,
            &s2.heads,
            &cfg.weights,
            cfg.pairing,
            &batch,
            shuffle_seed,
            TermMask {
                classification: true,
                distr_bce: true,
                adversarial: false,
                factorization: false,
            },
        )
        .unwrap();
        apply_update(
            &mut s2,
            &eg,
            &hg,
            0.01,
            cfg.momentum,
            cfg.weight_decay,
            UpdateMask::ALL,
        );
        assert_eq!(s1.encoder, s2.encoder);
        assert_eq!(s1.heads, s2.heads);
    }

    #[test]
    fn adversarial_and_factorization_touch_encoder_only() {
        let ds = tiny_dataset();
        let net = tiny_net();
        let cfg = tiny_config(Mode::Debface);
        let map = identity_class_map(&ds);
        let batch = first_batch(&ds, 8);
        let mut state = TrainState::init(&net, Mode::Debface, cfg.seed, map);
        let heads_before = state.heads.clone();
        let encoder_before = state.encoder.clone();
        let (_, eg, hg) = compute_debface_grads(
            &state.encoder,
            &state.heads,
            &cfg.weights,
            cfg.pairing,
            &batch,
            99,
            TermMask {
                classification: false,
                distr_bce: false,
                adversarial: true,
                factorization: true,
            },
        )
        .unwrap();
        // Head gradients are identically zero for these terms.
        assert!(hg.gender.w.iter().all(|v| *v == 0.0));
        assert!(hg.age.w.iter().all(|v| *v == 0.0));
        assert!(hg.race.w.iter().all(|v| *v == 0.0));
        assert!(hg.identity.iter().all(|v| *v == 0.0));
        assert!(hg.distr.l1.w.iter().all(|v| *v == 0.0));
        assert!(hg.distr.l2.w.iter().all(|v| *v == 0.0));
        apply_update(
            &mut state,
            &eg,
            &hg,
            0.01,
            0.0,
            0.0,
            UpdateMask::ENCODER_ONLY,
        );
        assert_eq!(state.heads, heads_before);
        assert_ne!(state.encoder, encoder_before);
    }

    #[test]
    fn distribution_bce_touches_distribution_head_only() {
        let ds = tiny_dataset();
        let net = tiny_net();
        let cfg = tiny_config(Mode::Debface);
        let map = identity_class_map(&ds);
        let batch = first_batch(&ds, 8);
        let state = TrainState::init(&net, Mode::Debface, cfg.seed, map);
        let (_, eg, hg) = compute_debface_grads(
            &state.encoder,
            &state.heads,
            &cfg.weights,
            cfg.pairing,
            &batch,
            99,
            TermMask {
                classification: false,
                distr_bce: true,
                adversarial: false,
                factorization: false,
            },
        )
        .unwrap();
        assert!(eg.fc.w.iter().all(|v| *v == 0.0));
        assert!(eg.convs.iter().all(|c| c.w.iter().all(|v| *v == 0.0)));
        assert!(hg.gender.w.iter().all(|v| *v == 0.0));
        assert!(hg.identity.iter().all(|v| *v == 0.0));
        assert!(hg.distr.l1.w.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn baseface_history_has_only_identity_terms() {
        let ds = tiny_dataset();
        let cfg = tiny_config(Mode::Baseface);
        let (state, history) = train(&cfg, &tiny_net(), &ds).unwrap();
        assert_eq!(state.encoder.out_dim, 8);
        for r in &history {
            assert_eq!(r.demo_ce, 0.0);
            assert_eq!(r.distr_bce, 0.0);
            assert_eq!(r.adv, 0.0);
            assert_eq!(r.fact, 0.0);
            assert_eq!(r.total, r.id_am);
        }
        let (s2, _) = train(&cfg, &tiny_net(), &ds).unwrap();
        assert_eq!(state.encoder, s2.encoder);
    }

    #[test]
    fn aggregator_training_freezes_the_encoder() {
        let ds = tiny_dataset();
        let mut cfg = tiny_config(Mode::Debface);
        cfg.epochs = 1;
        cfg.lr_drop_epochs = vec![];
        let (state, _) = train(&cfg, &tiny_net(), &ds).unwrap();
        let encoder_before = state.encoder.clone();
        let mut acfg = tiny_config(Mode::Aggregator);
        acfg.epochs = 2;
        acfg.learning_rate = 0.01;
        let (agg, history) = train_aggregator(&acfg, &state, &ds).unwrap();
        assert_eq!(state.encoder, encoder_before);
        assert_eq!(history.len(), 2);
        assert_eq!(agg.block_dim(), 8);

        // Zero epochs leaves the freshly initialized aggregator untouched.
        let mut zcfg = acfg.clone();
        zcfg.epochs = 0;
        zcfg.lr_drop_epochs = vec![];
        let (agg0, h0) = train_aggregator(&zcfg, &state, &ds).unwrap();
        assert!(h0.is_empty());
        assert_eq!(agg0, AggregatorParams::init(8, zcfg.seed));
    }

    #[test]
    fn routed_deltas_match_analytic_gradients() {
        // With zero momentum and zero weight decay an SGD step is
        // exactly p -= lr * g; compare applied deltas against the
        // analytic routed gradients.
        let ds = tiny_dataset();
        let net = tiny_net();
        let mut cfg = tiny_config(Mode::Debface);
        cfg.momentum = 0.0;
        cfg.weight_decay = 0.0;
        let map = identity_class_map(&ds);
        let batch = first_batch(&ds, 8);
        let mut state = TrainState::init(&net, Mode::Debface, cfg.seed, map);
        let before = state.encoder.clone();
        let mut probe_rng = state.rng.clone();
        let shuffle_seed: u64 = probe_rng.random();
        let (_, eg, _) = compute_debface_grads(
            &state.encoder,
            &state.heads,
            &cfg.weights,
            cfg.pairing,
            &batch,
            shuffle_seed,
            TermMask::ALL,
        )
        .unwrap();
        let lr = 0.01;
        debface_step(&mut state, &cfg, &batch, lr).unwrap();
        let applied = &before.fc.w - &state.encoder.fc.w;
        let expected = eg.fc.w.mapv(|g| lr * g);
        let max_err = (&applied - &expected)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_err < 1e-9, "max delta error {max_err}");
    }

    #[test]
    fn alternating_schedule_runs_and_is_deterministic() {
        let ds = tiny_dataset();
        let mut cfg = tiny_config(Mode::Debface);
        cfg.schedule = Schedule::Alternating;
        cfg.epochs = 1;
        cfg.lr_drop_epochs = vec![];
        let (s1, h1) = train(&cfg, &tiny_net(), &ds).unwrap();
        let (s2, h2) = train(&cfg, &tiny_net(), &ds).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(s1.encoder, s2.encoder);
    }

    #[test]
    fn two_summand_pairing_has_six_pairs() {
        assert_eq!(adversarial_pairs(AdversarialPairing::Full).len(), 12);
        let pairs = adversarial_pairs(AdversarialPairing::TwoSummand);
        assert_eq!(pairs.len(), 6);
        assert!(pairs.iter().all(|(c, b)| c != b));
        assert!(pairs.iter().all(|(c, _)| *c != Attribute::Identity));
    }
}
