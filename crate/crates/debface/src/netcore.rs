//! Parameter containers and differentiable forward computations for the
//! shared encoder, the four attribute heads, the distribution
//! classifier, and the feature aggregator.

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{DebfaceError, Result};
use crate::nn::{ConvGrad, ConvLayer, Linear, LinearGrad};
use crate::rng;

/// How the last convolution stage is reduced before the affine output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    GlobalAvg,
    Flatten,
}

/// Architecture hyper-parameters shared by all models in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    /// Per-block embedding width D.
    pub block_dim: usize,
    /// Output channels of each stride-2 conv stage.
    pub conv_channels: Vec<usize>,
    pub pool: PoolKind,
    /// Hidden width of the two-layer distribution classifier.
    pub distr_hidden: usize,
    pub k_gender: usize,
    pub k_age: usize,
    pub k_race: usize,
    pub num_identities: usize,
}

impl NetConfig {
    pub fn desk_default(
        k_gender: usize,
        k_age: usize,
        k_race: usize,
        num_identities: usize,
    ) -> Self {
        Self {
            in_channels: 3,
            in_height: 32,
            in_width: 32,
            block_dim: 32,
            conv_channels: vec![8, 16, 32],
            pool: PoolKind::Flatten,
            distr_hidden: 64,
            k_gender,
            k_age,
            k_race,
            num_identities,
        }
    }

    pub fn demo_cardinality(&self, attr: Attribute) -> usize {
        match attr {
            Attribute::Gender => self.k_gender,
            Attribute::Age => self.k_age,
            Attribute::Race => self.k_race,
            Attribute::Identity => self.num_identities,
        }
    }
}

/// The four blocks of the encoder output, in the fixed concatenation
/// order (gender, age, race, identity).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Attribute {
    Gender,
    Age,
    Race,
    Identity,
}

pub const ALL_ATTRIBUTES: [Attribute; 4] = [
    Attribute::Gender,
    Attribute::Age,
    Attribute::Race,
    Attribute::Identity,
];

impl Attribute {
    /// Index of this attribute's block in the flat embedding.
    pub fn block_index(self) -> usize {
        match self {
            Attribute::Gender => 0,
            Attribute::Age => 1,
            Attribute::Race => 2,
            Attribute::Identity => 3,
        }
    }
}

/// Encoder output split into its four D-dimensional blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct DisentangledEmbedding {
    pub gender: Array1<f64>,
    pub age: Array1<f64>,
    pub race: Array1<f64>,
    pub id: Array1<f64>,
}

impl DisentangledEmbedding {
    pub fn dim(&self) -> usize {
        self.gender.len()
    }

    pub fn from_flat(flat: &ArrayView1<f64>, block_dim: usize) -> Result<Self> {
        if flat.len() != 4 * block_dim {
            return Err(DebfaceError::ShapeMismatch(format!(
                "expected flat embedding of length {}, got {}",
                4 * block_dim,
                flat.len()
            )));
        }
        let d = block_dim;
        Ok(Self {
            gender: flat.slice(s![0..d]).to_owned(),
            age: flat.slice(s![d..2 * d]).to_owned(),
            race: flat.slice(s![2 * d..3 * d]).to_owned(),
            id: flat.slice(s![3 * d..4 * d]).to_owned(),
        })
    }

    pub fn to_flat(&self) -> Array1<f64> {
        let d = self.dim();
        let mut flat = Array1::zeros(4 * d);
        flat.slice_mut(s![0..d]).assign(&self.gender);
        flat.slice_mut(s![d..2 * d]).assign(&self.age);
        flat.slice_mut(s![2 * d..3 * d]).assign(&self.race);
        flat.slice_mut(s![3 * d..4 * d]).assign(&self.id);
        flat
    }

    pub fn block(&self, attr: Attribute) -> &Array1<f64> {
        match attr {
            Attribute::Gender => &self.gender,
            Attribute::Age => &self.age,
            Attribute::Race => &self.race,
            Attribute::Identity => &self.id,
        }
    }
}

/// Column range of one block inside a flat `(n, 4D)` batch.
pub fn block_range(attr: Attribute, d: usize) -> std::ops::Range<usize> {
    let i = attr.block_index();
    i * d..(i + 1) * d
}

// ---------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------

/// Small convolutional encoder: stride-2 3x3 conv stages with ReLU,
/// reduction, then an affine map to `out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub convs: Vec<ConvLayer>,
    pub fc: Linear,
    pub in_shape: (usize, usize, usize),
    pub pool: PoolKind,
    pub out_dim: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub convs: Vec<ConvGrad>,
    pub fc: LinearGrad,
}

pub struct EncoderCache {
    input: Array4<f64>,
    cols: Vec<Array2<f64>>,
    pre: Vec<Array4<f64>>,
    acts: Vec<Array4<f64>>,
    feat: Array2<f64>,
}

impl EncoderParams {
    /// `out_blocks` is 4 for the disentangling model and 1 for the plain
    /// identity baseline, so comparisons are block-width fair.
    pub fn init(cfg: &NetConfig, out_blocks: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "encoder-init", &[]);
        let mut convs = Vec::new();
        let mut in_ch = cfg.in_channels;
        for &out_ch in &cfg.conv_channels {
            convs.push(ConvLayer::init(out_ch, in_ch, 2, &mut r));
            in_ch = out_ch;
        }
        let (mut h, mut w) = (cfg.in_height, cfg.in_width);
        for c in &convs {
            let (oh, ow) = c.out_hw(h, w);
            h = oh;
            w = ow;
        }
        let feat_dim = match cfg.pool {
            PoolKind::GlobalAvg => in_ch,
            PoolKind::Flatten => in_ch * h * w,
        };
        let out_dim = out_blocks * cfg.block_dim;
        Self {
            convs,
            fc: Linear::init(out_dim, feat_dim, &mut r),
            in_shape: (cfg.in_channels, cfg.in_height, cfg.in_width),
            pool: cfg.pool,
            out_dim,
        }
    }

    /// Forward a batch of images `(n, c, h, w)` to `(n, out_dim)`.
    pub fn forward_batch(&self, images: &Array4<f64>) -> Result<(Array2<f64>, EncoderCache)> {
        let (n, c, h, w) = images.dim();
        if (c, h, w) != self.in_shape {
            return Err(DebfaceError::ShapeMismatch(format!(
                "encoder expects images of shape {:?}, got {:?}",
                self.in_shape,
                (c, h, w)
            )));
        }
        let mut x = images.clone();
        let mut cols = Vec::new();
        let mut pre = Vec::new();
        let mut acts = Vec::new();
        for conv in &self.convs {
            let (p, cl) = conv.forward(&x);
            cols.push(cl);
            pre.push(p.clone());
            let mut a = p;
            crate::nn::relu_inplace4(&mut a);
            acts.push(a.clone());
            x = a;
        }
        let (_, lc, lh, lw) = x.dim();
        let feat = match self.pool {
            PoolKind::GlobalAvg => {
                let mut f = Array2::zeros((n, lc));
                for i in 0..n {
                    for ch in 0..lc {
                        let mut s = 0.0;
                        for y in 0..lh {
                            for xx in 0..lw {
                                s += x[[i, ch, y, xx]];
                            }
                        }
                        f[[i, ch]] = s / (lh * lw) as f64;
                    }
                }
                f
            }
            PoolKind::Flatten => x
                .clone()
                .into_shape_with_order((n, lc * lh * lw))
                .expect("contiguous"),
        };
        let out = self.fc.forward(&feat.view());
        Ok((
            out,
            EncoderCache {
                input: images.clone(),
                cols,
                pre,
                acts,
                feat,
            },
        ))
    }

    pub fn backward(&self, cache: &EncoderCache, d_out: &ArrayView2<f64>) -> EncoderGrads {
        let (fc_grad, d_feat) = self.fc.backward(&cache.feat.view(), d_out);
        let last = cache.acts.last().expect("encoder has conv stages");
        let (n, lc, lh, lw) = last.dim();
        let mut d_x: Array4<f64> = match self.pool {
            PoolKind::GlobalAvg => {
                let mut d = Array4::zeros((n, lc, lh, lw));
                let scale = 1.0 / (lh * lw) as f64;
                for i in 0..n {
                    for ch in 0..lc {
                        let g = d_feat[[i, ch]] * scale;
                        for y in 0..lh {
                            for xx in 0..lw {
                                d[[i, ch, y, xx]] = g;
                            }
                        }
                    }
                }
                d
            }
            PoolKind::Flatten => d_feat
                .into_shape_with_order((n, lc, lh, lw))
                .expect("contiguous"),
        };
        let mut conv_grads: Vec<Option<ConvGrad>> = vec![None; self.convs.len()];
        for li in (0..self.convs.len()).rev() {
            crate::nn::relu_backward4(&cache.pre[li], &mut d_x);
            let in_shape = if li == 0 {
                cache.input.dim()
            } else {
                cache.acts[li - 1].dim()
            };
            let (g, d_in) = self.convs[li].backward(&cache.cols[li], in_shape, &d_x);
            conv_grads[li] = Some(g);
            d_x = d_in;
        }
        EncoderGrads {
            convs: conv_grads.into_iter().map(|g| g.unwrap()).collect(),
            fc: fc_grad,
        }
    }
}

/// Encode one image into its four blocks (disentangling encoder only).
pub fn encode(
    params: &EncoderParams,
    image: &ndarray::Array3<f64>,
) -> Result<DisentangledEmbedding> {
    let d = params.out_dim / 4;
    if params.out_dim % 4 != 0 {
        return Err(DebfaceError::StateMismatch(
            "encode requires a 4-block encoder".into(),
        ));
    }
    let (c, h, w) = image.dim();
    let mut batch = Array4::zeros((1, c, h, w));
    batch.slice_mut(s![0, .., .., ..]).assign(image);
    let (out, _) = params.forward_batch(&batch)?;
    DisentangledEmbedding::from_flat(&out.row(0), d)
}

// ---------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------

/// Two affine layers with a ReLU; the joint-vs-product discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct DistrHead {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone)]
pub struct DistrGrad {
    pub l1: LinearGrad,
    pub l2: LinearGrad,
}

pub struct DistrCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl DistrHead {
    pub fn init(in_dim: usize, hidden: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        Self {
            l1: Linear::init(hidden, in_dim, rng),
            l2: Linear::init(2, hidden, rng),
        }
    }

    pub fn forward_batch(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, DistrCache)> {
        if x.ncols() != self.l1.in_dim() {
            return Err(DebfaceError::ShapeMismatch(format!(
                "distribution head expects input dim {}, got {}",
                self.l1.in_dim(),
                x.ncols()
            )));
        }
        let pre = self.l1.forward(x);
        let mut hidden = pre.clone();
        crate::nn::relu_inplace2(&mut hidden);
        let out = self.l2.forward(&hidden.view());
        Ok((
            out,
            DistrCache {
                input: x.to_owned(),
                pre,
                hidden,
            },
        ))
    }

    /// Backward returning head gradients and the input gradient.
    pub fn backward(
        &self,
        cache: &DistrCache,
        d_out: &ArrayView2<f64>,
    ) -> (DistrGrad, Array2<f64>) {
        let (g2, mut d_hidden) = self.l2.backward(&cache.hidden.view(), d_out);
        crate::nn::relu_backward2(&cache.pre, &mut d_hidden);
        let (g1, d_x) = self.l1.backward(&cache.input.view(), &d_hidden.view());
        (DistrGrad { l1: g1, l2: g2 }, d_x)
    }

    /// Input gradient with the head held constant.
    pub fn backward_input(&self, cache: &DistrCache, d_out: &ArrayView2<f64>) -> Array2<f64> {
        let mut d_hidden = self.l2.backward_input(d_out);
        crate::nn::relu_backward2(&cache.pre, &mut d_hidden);
        self.l1.backward_input(&d_hidden.view())
    }
}

/// All classifier heads. The identity head stores one weight row per
/// training identity, maintained at unit norm by projection after each
/// optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub gender: Linear,
    pub age: Linear,
    pub race: Linear,
    pub identity: Array2<f64>,
    pub distr: DistrHead,
}

impl HeadParams {
    pub fn init(cfg: &NetConfig, seed: u64) -> Self {
        let d = cfg.block_dim;
        let mut r = rng::stream(seed, "heads-init", &[]);
        let gender = Linear::init(cfg.k_gender, d, &mut r);
        let age = Linear::init(cfg.k_age, d, &mut r);
        let race = Linear::init(cfg.k_race, d, &mut r);
        let mut identity = Array2::zeros((cfg.num_identities, d));
        for v in identity.iter_mut() {
            use rand::Rng;
            *v = r.random_range(-1.0..1.0);
        }
        renormalize_rows(&mut identity);
        let distr = DistrHead::init(4 * d, cfg.distr_hidden, &mut r);
        Self {
            gender,
            age,
            race,
            identity,
            distr,
        }
    }

    pub fn demo_head(&self, attr: Attribute) -> Option<&Linear> {
        match attr {
            Attribute::Gender => Some(&self.gender),
            Attribute::Age => Some(&self.age),
            Attribute::Race => Some(&self.race),
            Attribute::Identity => None,
        }
    }
}

/// Project every row of `w` back onto the unit sphere.
pub fn renormalize_rows(w: &mut Array2<f64>) {
    for mut row in w.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
}

/// Class scores of one head on one block: an affine map for demographic
/// heads, cosine similarities in [-1,1] for the identity head.
pub fn head_logits(
    heads: &HeadParams,
    attr: Attribute,
    block: &ArrayView1<f64>,
) -> Result<Array1<f64>> {
    match heads.demo_head(attr) {
        Some(lin) => {
            if block.len() != lin.in_dim() {
                return Err(DebfaceError::ShapeMismatch(format!(
                    "{attr:?} head expects dim {}, got {}",
                    lin.in_dim(),
                    block.len()
                )));
            }
            Ok(lin.forward1(block))
        }
        None => {
            let cos = identity_cosines(&heads.identity.view(), &block.insert_axis(Axis(0)))?;
            Ok(cos.row(0).to_owned())
        }
    }
}

/// Cosine similarities between L2-normalized rows of `x` and each
/// (normalized) identity class vector. `x: (n, d)` -> `(n, num_id)`.
pub fn identity_cosines(w: &ArrayView2<f64>, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != w.ncols() {
        return Err(DebfaceError::ShapeMismatch(format!(
            "identity head expects dim {}, got {}",
            w.ncols(),
            x.ncols()
        )));
    }
    let mut x_hat = x.to_owned();
    for mut row in x_hat.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(DebfaceError::ZeroNorm(
                "identity head input block has zero norm".into(),
            ));
        }
        row.mapv_inplace(|v| v / norm);
    }
    let mut w_hat = w.to_owned();
    renormalize_rows(&mut w_hat);
    Ok(x_hat.dot(&w_hat.t()))
}

/// Backward of [`identity_cosines`] through both normalizations.
/// Returns (d_x, d_w); either side can be skipped for routing.
pub fn identity_cosines_backward(
    w: &ArrayView2<f64>,
    x: &ArrayView2<f64>,
    d_cos: &ArrayView2<f64>,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Array2<f64>>, Option<Array2<f64>>) {
    let mut x_hat = x.to_owned();
    let mut x_norms = Vec::with_capacity(x.nrows());
    for mut row in x_hat.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        x_norms.push(norm);
        row.mapv_inplace(|v| v / norm);
    }
    let mut w_hat = w.to_owned();
    let mut w_norms = Vec::with_capacity(w.nrows());
    for mut row in w_hat.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        w_norms.push(norm.max(f64::MIN_POSITIVE));
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    let d_x = want_dx.then(|| {
        let d_x_hat = d_cos.dot(&w_hat);
        let mut d_x = Array2::zeros(x.raw_dim());
        for i in 0..x.nrows() {
            let xh = x_hat.row(i);
            let g = d_x_hat.row(i);
            let proj = g.dot(&xh);
            for j in 0..x.ncols() {
                d_x[[i, j]] = (g[j] - proj * xh[j]) / x_norms[i];
            }
        }
        d_x
    });
    let d_w = want_dw.then(|| {
        let d_w_hat = d_cos.t().dot(&x_hat);
        let mut d_w = Array2::zeros(w.raw_dim());
        for i in 0..w.nrows() {
            let wh = w_hat.row(i);
            let g = d_w_hat.row(i);
            let proj = g.dot(&wh);
            for j in 0..w.ncols() {
                d_w[[i, j]] = (g[j] - proj * wh[j]) / w_norms[i];
            }
        }
        d_w
    });
    (d_x, d_w)
}

// ---------------------------------------------------------------------
// Feature aggregator
// ---------------------------------------------------------------------

/// One residual unit: `x + l2(prelu(l1(x)))` with a learnable scalar
/// P-ReLU slope.
#[derive(Debug, Clone, PartialEq)]
pub struct ResUnit {
    pub l1: Linear,
    pub l2: Linear,
    pub prelu: f64,
}

#[derive(Debug, Clone)]
pub struct ResUnitGrad {
    pub l1: LinearGrad,
    pub l2: LinearGrad,
    pub prelu: f64,
}

struct ResUnitCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl ResUnit {
    fn init(dim: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        Self {
            l1: Linear::init(dim, dim, rng),
            l2: Linear::init(dim, dim, rng),
            prelu: 0.25,
        }
    }

    fn forward(&self, x: &ArrayView2<f64>) -> (Array2<f64>, ResUnitCache) {
        let pre = self.l1.forward(x);
        let a = self.prelu;
        let act = pre.mapv(|v| if v > 0.0 { v } else { a * v });
        let out = self.l2.forward(&act.view()) + x;
        (
            out,
            ResUnitCache {
                input: x.to_owned(),
                pre,
                act,
            },
        )
    }

    fn backward(
        &self,
        cache: &ResUnitCache,
        d_out: &ArrayView2<f64>,
    ) -> (ResUnitGrad, Array2<f64>) {
        let (g2, d_act) = self.l2.backward(&cache.act.view(), d_out);
        let mut d_pre = d_act.clone();
        let mut d_a = 0.0;
        for ((p, g), dp) in cache.pre.iter().zip(d_act.iter()).zip(d_pre.iter_mut()) {
            if *p <= 0.0 {
                d_a += g * p;
                *dp = g * self.prelu;
            }
        }
        let (g1, d_in) = self.l1.backward(&cache.input.view(), &d_pre.view());
        let d_x = d_in + d_out;
        (
            ResUnitGrad {
                l1: g1,
                l2: g2,
                prelu: d_a,
            },
            d_x,
        )
    }
}

/// Projection from the (id, gender, race) blocks to a D-dimensional
/// aggregated representation, followed by two residual units.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams {
    pub proj: Linear,
    pub units: Vec<ResUnit>,
}

#[derive(Debug, Clone)]
pub struct AggregatorGrads {
    pub proj: LinearGrad,
    pub units: Vec<ResUnitGrad>,
}

pub struct AggregatorCache {
    input: Array2<f64>,
    unit_caches: Vec<ResUnitCache>,
}

impl AggregatorParams {
    pub fn init(block_dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "aggregator-init", &[]);
        let mut proj = Linear::init(block_dim, 3 * block_dim, &mut r);
        // Start as a passthrough of the identity block: exact identity
        // on the first block's columns, damped random weights on the
        // demographic columns, zero bias. The aggregated representation
        // then begins at the identity features and triplet training
        // decides how much demographic signal to mix back in.
        for i in 0..block_dim {
            for j in 0..3 * block_dim {
                proj.w[[i, j]] = if j < block_dim {
                    if i == j {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    0.1 * proj.w[[i, j]]
                };
            }
        }
        proj.b.fill(0.0);
        let mut units = vec![
            ResUnit::init(block_dim, &mut r),
            ResUnit::init(block_dim, &mut r),
        ];
        // Zero the second affine of each residual unit so it starts as
        // the identity map.
        for u in &mut units {
            u.l2.w.fill(0.0);
            u.l2.b.fill(0.0);
        }
        Self { proj, units }
    }

    pub fn block_dim(&self) -> usize {
        self.proj.out_dim()
    }

    /// `x: (n, 3D)` in the fixed order (id, gender, race) -> `(n, D)`.
    pub fn forward_batch(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, AggregatorCache)> {
        if x.ncols() != self.proj.in_dim() {
            return Err(DebfaceError::ShapeMismatch(format!(
                "aggregator expects input dim {}, got {}",
                self.proj.in_dim(),
                x.ncols()
            )));
        }
        let mut h = self.proj.forward(x);
        let mut unit_caches = Vec::with_capacity(self.units.len());
        for unit in &self.units {
            let (next, cache) = unit.forward(&h.view());
            unit_caches.push(cache);
            h = next;
        }
        Ok((
            h,
            AggregatorCache {
                input: x.to_owned(),
                unit_caches,
            },
        ))
    }

    pub fn backward(&self, cache: &AggregatorCache, d_out: &ArrayView2<f64>) -> AggregatorGrads {
        let mut d = d_out.to_owned();
        let mut unit_grads: Vec<Option<ResUnitGrad>> = vec![None; self.units.len()];
        for i in (0..self.units.len()).rev() {
            let (g, d_in) = self.units[i].backward(&cache.unit_caches[i], &d.view());
            unit_grads[i] = Some(g);
            d = d_in;
        }
        let (proj_grad, _) = self.proj.backward(&cache.input.view(), &d.view());
        AggregatorGrads {
            proj: proj_grad,
            units: unit_grads.into_iter().map(|g| g.unwrap()).collect(),
        }
    }
}

/// Stack the (id, gender, race) blocks of a flat embedding batch into
/// the aggregator's input layout. The age block is never read.
pub fn aggregator_input(flat: &ArrayView2<f64>, d: usize) -> Array2<f64> {
    let n = flat.nrows();
    let mut x = Array2::zeros((n, 3 * d));
    x.slice_mut(s![.., 0..d])
        .assign(&flat.slice(s![.., block_range(Attribute::Identity, d)]));
    x.slice_mut(s![.., d..2 * d])
        .assign(&flat.slice(s![.., block_range(Attribute::Gender, d)]));
    x.slice_mut(s![.., 2 * d..3 * d])
        .assign(&flat.slice(s![.., block_range(Attribute::Race, d)]));
    x
}

/// Aggregate one embedding into its DemoID vector. Consumes exactly the
/// id, gender, and race blocks.
pub fn aggregate(params: &AggregatorParams, emb: &DisentangledEmbedding) -> Result<Array1<f64>> {
    let d = emb.dim();
    if params.proj.in_dim() != 3 * d {
        return Err(DebfaceError::ShapeMismatch(format!(
            "aggregator configured for input dim {}, embedding blocks have dim {d}",
            params.proj.in_dim()
        )));
    }
    let mut x = Array1::zeros(3 * d);
    x.slice_mut(s![0..d]).assign(&emb.id);
    x.slice_mut(s![d..2 * d]).assign(&emb.gender);
    x.slice_mut(s![2 * d..3 * d]).assign(&emb.race);
    let (out, _) = params.forward_batch(&x.insert_axis(Axis(0)).view())?;
    Ok(out.row(0).to_owned())
}
