//! Differentiable objectives: demographic cross-entropy, AM-Softmax,
//! uniform-target adversarial loss, shuffle-product construction,
//! distribution-classifier loss, factorization loss, batch-hard triplet
//! loss, and the weighted joint objective.
//!
//! All log-softmax computations are max-shifted. Every loss has a
//! companion `*_with_grad` returning the analytic gradient with respect
//! to its logits/inputs; the training loop routes those gradients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{DebfaceError, Result};
use crate::netcore::{head_logits, DisentangledEmbedding, HeadParams, ALL_ATTRIBUTES};
use crate::rng;

/// Scalar weights of the joint objective plus the margin hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub nu_fact: f64,
    pub am_scale: f64,
    pub am_margin: f64,
    pub triplet_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv: 0.1,
            nu_fact: 0.1,
            am_scale: 64.0,
            am_margin: 0.5,
            triplet_margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_adv,
            self.nu_fact,
            self.am_scale,
            self.am_margin,
            self.triplet_margin,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(DebfaceError::InvalidSpec(
                "loss weights must be finite".into(),
            ));
        }
        if self.am_scale <= 0.0 {
            return Err(DebfaceError::InvalidSpec(
                "am_scale must be positive".into(),
            ));
        }
        if self.lambda_adv < 0.0
            || self.nu_fact < 0.0
            || self.am_margin < 0.0
            || self.triplet_margin < 0.0
        {
            return Err(DebfaceError::InvalidSpec(
                "loss weights must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Raw (unweighted) values of the five loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub demo_ce: f64,
    pub id_am: f64,
    pub distr_bce: f64,
    pub adv: f64,
    pub fact: f64,
}

/// The five logged terms and their exact weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub demo_ce: f64,
    pub id_am: f64,
    pub distr_bce: f64,
    pub adv: f64,
    pub fact: f64,
    pub total: f64,
}

/// Combine term values into the weighted joint objective. `total` is
/// computed as exactly `demo_ce + id_am + distr_bce + lambda*adv + nu*fact`.
pub fn joint_loss(terms: &LossTerms, weights: &LossWeights) -> Result<LossBreakdown> {
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
    Ok(LossBreakdown {
        demo_ce: terms.demo_ce,
        id_am: terms.id_am,
        distr_bce: terms.distr_bce,
        adv: terms.adv,
        fact: terms.fact,
        total: terms.demo_ce
            + terms.id_am
            + terms.distr_bce
            + weights.lambda_adv * terms.adv
            + weights.nu_fact * terms.fact,
    })
}

/// Max-shifted log-softmax.
pub fn log_softmax(logits: &ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.mapv(|z| z - log_z)
}

pub fn softmax(logits: &ArrayView1<f64>) -> Array1<f64> {
    log_softmax(logits).mapv(f64::exp)
}

/// Standard softmax cross-entropy, `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &ArrayView1<f64>, label: usize) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, label)?.0)
}

pub fn cross_entropy_with_grad(
    logits: &ArrayView1<f64>,
    label: usize,
) -> Result<(f64, Array1<f64>)> {
    if label >= logits.len() {
        return Err(DebfaceError::LabelOutOfRange {
            what: "cross_entropy".into(),
            label,
            cardinality: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(DebfaceError::NonFinite {
            term: "cross_entropy logits".into(),
        });
    }
    let ls = log_softmax(logits);
    let mut grad = ls.mapv(f64::exp);
    grad[label] -= 1.0;
    Ok((-ls[label], grad))
}

/// Additive-margin softmax on cosine logits:
/// `-log( e^{s(c_y - m)} / (e^{s(c_y - m)} + sum_{j!=y} e^{s c_j}) )`.
/// The gradient is with respect to the cosines.
pub fn am_softmax(cosines: &ArrayView1<f64>, label: usize, s: f64, m: f64) -> Result<f64> {
    Ok(am_softmax_with_grad(cosines, label, s, m)?.0)
}

pub fn am_softmax_with_grad(
    cosines: &ArrayView1<f64>,
    label: usize,
    s: f64,
    m: f64,
) -> Result<(f64, Array1<f64>)> {
    if label >= cosines.len() {
        return Err(DebfaceError::LabelOutOfRange {
            what: "am_softmax".into(),
            label,
            cardinality: cosines.len(),
        });
    }
    if s <= 0.0 {
        return Err(DebfaceError::InvalidSpec(
            "am_softmax scale must be > 0".into(),
        ));
    }
    let mut z = cosines.mapv(|c| s * c);
    z[label] = s * (cosines[label] - m);
    let (loss, mut grad) = cross_entropy_with_grad(&z.view(), label)?;
    // Chain rule through z = s*c (the margin shift has unit slope in c).
    grad.mapv_inplace(|g| g * s);
    Ok((loss, grad))
}

/// Cross-entropy against the uniform distribution over K classes:
/// `-(1/K) * sum_k log softmax(logits)[k]`. Lower-bounded by ln K with
/// equality iff softmax(logits) is uniform.
pub fn uniform_adversarial_loss(logits: &ArrayView1<f64>) -> Result<f64> {
    Ok(uniform_adversarial_loss_with_grad(logits)?.0)
}

pub fn uniform_adversarial_loss_with_grad(logits: &ArrayView1<f64>) -> Result<(f64, Array1<f64>)> {
    let k = logits.len();
    if k < 2 {
        return Err(DebfaceError::InvalidSpec(
            "uniform_adversarial_loss requires K >= 2".into(),
        ));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(DebfaceError::NonFinite {
            term: "uniform_adversarial_loss logits".into(),
        });
    }
    let ls = log_softmax(logits);
    let loss = -ls.sum() / k as f64;
    let grad = ls.mapv(f64::exp) - 1.0 / k as f64;
    Ok((loss, grad))
}

/// Uniform-target loss on the 2-class distribution classifier output.
pub fn factorization_loss(logits: &ArrayView1<f64>) -> Result<f64> {
    Ok(factorization_loss_with_grad(logits)?.0)
}

pub fn factorization_loss_with_grad(logits: &ArrayView1<f64>) -> Result<(f64, Array1<f64>)> {
    if logits.len() != 2 {
        return Err(DebfaceError::ShapeMismatch(
            "factorization_loss expects a 2-vector".into(),
        ));
    }
    uniform_adversarial_loss_with_grad(logits)
}

/// Mean two-class cross-entropy with joint samples labeled 0 and
/// shuffled-product samples labeled 1.
pub fn distribution_loss(
    logits_joint: &ArrayView2<f64>,
    logits_product: &ArrayView2<f64>,
) -> Result<f64> {
    Ok(distribution_loss_with_grad(logits_joint, logits_product)?.0)
}

/// Returns (loss, d/d joint logits, d/d product logits).
pub fn distribution_loss_with_grad(
    logits_joint: &ArrayView2<f64>,
    logits_product: &ArrayView2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if logits_joint.nrows() == 0 || logits_product.nrows() == 0 {
        return Err(DebfaceError::EmptyInput("distribution_loss".into()));
    }
    if logits_joint.ncols() != 2 || logits_product.ncols() != 2 {
        return Err(DebfaceError::ShapeMismatch(
            "distribution_loss expects 2-class logits".into(),
        ));
    }
    let n = (logits_joint.nrows() + logits_product.nrows()) as f64;
    let mut loss = 0.0;
    let mut g_joint = Array2::zeros(logits_joint.raw_dim());
    let mut g_product = Array2::zeros(logits_product.raw_dim());
    for (i, row) in logits_joint.rows().into_iter().enumerate() {
        let (l, g) = cross_entropy_with_grad(&row, 0)?;
        loss += l;
        g_joint.row_mut(i).assign(&(g / n));
    }
    for (i, row) in logits_product.rows().into_iter().enumerate() {
        let (l, g) = cross_entropy_with_grad(&row, 1)?;
        loss += l;
        g_product.row_mut(i).assign(&(g / n));
    }
    Ok((loss / n, g_joint, g_product))
}

/// Sum of uniform-target losses over every (classifier, non-corresponding
/// block) pair — 12 pairs for the four heads. The value is what routes
/// into the encoder; head parameters are constants for this term.
pub fn adversarial_term(heads: &HeadParams, emb: &DisentangledEmbedding) -> Result<f64> {
    let mut total = 0.0;
    for classifier in ALL_ATTRIBUTES {
        for block_attr in ALL_ATTRIBUTES {
            if block_attr == classifier {
                continue;
            }
            let logits = head_logits(heads, classifier, &emb.block(block_attr).view())?;
            total += uniform_adversarial_loss(&logits.view())?;
        }
    }
    Ok(total)
}

/// The four per-block permutations of a shuffle-product batch, in the
/// fixed block order (gender, age, race, identity).
pub fn shuffle_permutations(n: usize, seed: u64) -> [Vec<usize>; 4] {
    let mut out: [Vec<usize>; 4] = Default::default();
    for (i, slot) in out.iter_mut().enumerate() {
        let mut r = rng::stream(seed, "shuffle-product", &[i as u64]);
        *slot = rng::permutation(&mut r, n);
    }
    out
}

/// Independently permute each attribute block across the batch,
/// approximating samples of the product of per-attribute marginals.
pub fn shuffle_product_batch(
    batch: &[DisentangledEmbedding],
    seed: u64,
) -> Result<Vec<DisentangledEmbedding>> {
    if batch.is_empty() {
        return Err(DebfaceError::EmptyInput("shuffle_product_batch".into()));
    }
    let perms = shuffle_permutations(batch.len(), seed);
    Ok((0..batch.len())
        .map(|i| DisentangledEmbedding {
            gender: batch[perms[0][i]].gender.clone(),
            age: batch[perms[1][i]].age.clone(),
            race: batch[perms[2][i]].race.clone(),
            id: batch[perms[3][i]].id.clone(),
        })
        .collect())
}

/// Batch-hard triplet loss on (vector, identity) rows: per anchor, the
/// hardest positive (max squared distance) and hardest negative (min
/// squared distance); hinges averaged over the anchors with a nonzero
/// hinge. Zero when no hinge is active.
pub fn hard_triplet_loss(vectors: &ArrayView2<f64>, labels: &[usize], alpha: f64) -> Result<f64> {
    Ok(hard_triplet_loss_with_grad(vectors, labels, alpha)?.0)
}

pub fn hard_triplet_loss_with_grad(
    vectors: &ArrayView2<f64>,
    labels: &[usize],
    alpha: f64,
) -> Result<(f64, Array2<f64>)> {
    let n = vectors.nrows();
    if n != labels.len() {
        return Err(DebfaceError::ShapeMismatch(
            "hard_triplet_loss: vectors and labels length differ".into(),
        ));
    }
    let distinct: std::collections::BTreeSet<_> = labels.iter().collect();
    if distinct.len() < 2 {
        return Err(DebfaceError::InvalidSpec(
            "hard_triplet_loss requires at least 2 identities".into(),
        ));
    }
    let mut label_counts = std::collections::BTreeMap::new();
    for l in labels {
        *label_counts.entry(*l).or_insert(0usize) += 1;
    }
    if !label_counts.values().any(|c| *c >= 2) {
        return Err(DebfaceError::InvalidSpec(
            "hard_triplet_loss requires an identity with >= 2 samples".into(),
        ));
    }

    let mut d2 = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let diff = &vectors.row(i) - &vectors.row(j);
            let d = diff.dot(&diff);
            d2[[i, j]] = d;
            d2[[j, i]] = d;
        }
    }

    // (anchor, hardest positive, hardest negative, hinge) for active anchors.
    let mut active = Vec::new();
    for a in 0..n {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if hardest_pos.is_none_or(|(_, d)| d2[[a, j]] > d) {
                    hardest_pos = Some((j, d2[[a, j]]));
                }
            } else if hardest_neg.is_none_or(|(_, d)| d2[[a, j]] < d) {
                hardest_neg = Some((j, d2[[a, j]]));
            }
        }
        if let (Some((p, dp)), Some((ng, dn))) = (hardest_pos, hardest_neg) {
            let hinge = dp - dn + alpha;
            if hinge > 0.0 {
                active.push((a, p, ng, hinge));
            }
        }
    }

    let mut grads = Array2::zeros(vectors.raw_dim());
    if active.is_empty() {
        return Ok((0.0, grads));
    }
    let m = active.len() as f64;
    let loss = active.iter().map(|(_, _, _, h)| h).sum::<f64>() / m;
    for (a, p, ng, _) in &active {
        let ap = &vectors.row(*a) - &vectors.row(*p);
        let an = &vectors.row(*a) - &vectors.row(*ng);
        let mut ga = grads.row_mut(*a);
        ga += &((&ap - &an).mapv(|v| 2.0 * v / m));
        let mut gp = grads.row_mut(*p);
        gp += &ap.mapv(|v| -2.0 * v / m);
        let mut gn = grads.row_mut(*ng);
        gn += &an.mapv(|v| 2.0 * v / m);
    }
    Ok((loss, grads))
}
