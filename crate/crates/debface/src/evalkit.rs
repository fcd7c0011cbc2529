//! Fairness evaluation: cohort-wise verification AUC, biasness,
//! demographic-leakage probes, cross-demographic false-accept analysis,
//! and imposter-score distribution analysis.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::checkpoint::ModelCheckpoint;
use crate::error::{DebfaceError, Result};
use crate::losses;
use crate::netcore::{aggregator_input, block_range, Attribute};
use crate::nn::Linear;
use crate::rng;
use crate::synthgen::{CohortKey, LabeledSample};
use crate::trainloop::{stack_images, Mode};

/// Which representation a table of embeddings was extracted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Baseface,
    DebfaceId,
    Demoid,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Provenance::Baseface => "baseface",
            Provenance::DebfaceId => "debface_id",
            Provenance::Demoid => "demoid",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Provenance {
    type Err = DebfaceError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseface" => Ok(Provenance::Baseface),
            "debface_id" => Ok(Provenance::DebfaceId),
            "demoid" => Ok(Provenance::Demoid),
            other => Err(DebfaceError::Config(format!(
                "unknown provenance `{other}`"
            ))),
        }
    }
}

/// Fixed-dimension embeddings with identity and demographic labels.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub provenance: Provenance,
    pub embeddings: Array2<f64>,
    pub identity: Vec<usize>,
    pub gender: Vec<usize>,
    pub age: Vec<usize>,
    pub race: Vec<usize>,
}

impl EmbeddingTable {
    pub fn len(&self) -> usize {
        self.identity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identity.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn cohort(&self, i: usize) -> CohortKey {
        CohortKey {
            gender: self.gender[i],
            age_group: self.age[i],
            race: self.race[i],
        }
    }

    pub fn attr_label(&self, attr: Attribute, i: usize) -> usize {
        match attr {
            Attribute::Gender => self.gender[i],
            Attribute::Age => self.age[i],
            Attribute::Race => self.race[i],
            Attribute::Identity => self.identity[i],
        }
    }

    /// Header line `dim n provenance`, then per row tab-separated
    /// `identity gender age race v1 ... v_dim` (9 significant digits).
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "{} {} {}", self.dim(), self.len(), self.provenance).unwrap();
        for i in 0..self.len() {
            write!(
                out,
                "{}\t{}\t{}\t{}",
                self.identity[i], self.gender[i], self.age[i], self.race[i]
            )
            .unwrap();
            for v in self.embeddings.row(i) {
                write!(out, "\t{:.8e}", v).unwrap();
            }
            out.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| DebfaceError::io(path, e))?;
        f.write_all(out.as_bytes())
            .map_err(|e| DebfaceError::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(DebfaceError::MissingArtifact(path.to_path_buf()));
        }
        let malformed = |reason: String| DebfaceError::Malformed {
            path: path.to_path_buf(),
            reason,
        };
        let f = std::fs::File::open(path).map_err(|e| DebfaceError::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let header = lines
            .next()
            .ok_or_else(|| malformed("empty file".into()))?
            .map_err(|e| DebfaceError::io(path, e))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(malformed(format!("bad header `{header}`")));
        }
        let dim: usize = parts[0].parse().map_err(|_| malformed("bad dim".into()))?;
        let n: usize = parts[1]
            .parse()
            .map_err(|_| malformed("bad count".into()))?;
        let provenance: Provenance = parts[2].parse()?;
        let mut embeddings = Array2::zeros((n, dim));
        let (mut identity, mut gender, mut age, mut race) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| DebfaceError::io(path, e))?;
            if i >= n {
                return Err(malformed("more rows than header count".into()));
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 + dim {
                return Err(malformed(format!("row {i} has {} fields", fields.len())));
            }
            let label = |s: &str| -> Result<usize> {
                s.parse()
                    .map_err(|_| malformed(format!("bad label `{s}` in row {i}")))
            };
            identity.push(label(fields[0])?);
            gender.push(label(fields[1])?);
            age.push(label(fields[2])?);
            race.push(label(fields[3])?);
            for (j, s) in fields[4..].iter().enumerate() {
                embeddings[[i, j]] = s
                    .parse()
                    .map_err(|_| malformed(format!("bad value `{s}` in row {i}")))?;
            }
        }
        if identity.len() != n {
            return Err(malformed(format!(
                "expected {n} rows, found {}",
                identity.len()
            )));
        }
        Ok(Self {
            provenance,
            embeddings,
            identity,
            gender,
            age,
            race,
        })
    }
}

/// Forward a dataset through a checkpointed model and collect the
/// representation named by the provenance tag. Row order equals
/// dataset order.
pub fn extract_embeddings(
    ckpt: &ModelCheckpoint,
    dataset: &[LabeledSample],
    which: Provenance,
) -> Result<EmbeddingTable> {
    match which {
        Provenance::Baseface => ckpt.require_mode(Mode::Baseface)?,
        Provenance::DebfaceId | Provenance::Demoid => ckpt.require_mode(Mode::Debface)?,
    }
    if which == Provenance::Demoid && ckpt.aggregator.is_none() {
        return Err(DebfaceError::StateMismatch(
            "demoid extraction requires a trained aggregator".into(),
        ));
    }
    let d = ckpt.net.block_dim;
    let out_dim = match which {
        Provenance::Baseface | Provenance::DebfaceId | Provenance::Demoid => d,
    };
    let mut embeddings = Array2::zeros((dataset.len(), out_dim));
    const CHUNK: usize = 64;
    for (ci, chunk) in dataset.chunks(CHUNK).enumerate() {
        let refs: Vec<&LabeledSample> = chunk.iter().collect();
        let images = stack_images(&refs)?;
        let (flat, _) = ckpt.encoder.forward_batch(&images)?;
        let block: Array2<f64> = match which {
            Provenance::Baseface => flat,
            Provenance::DebfaceId => flat
                .slice(s![.., block_range(Attribute::Identity, d)])
                .to_owned(),
            Provenance::Demoid => {
                let input = aggregator_input(&flat.view(), d);
                let (out, _) = ckpt
                    .aggregator
                    .as_ref()
                    .unwrap()
                    .forward_batch(&input.view())?;
                out
            }
        };
        embeddings
            .slice_mut(s![ci * CHUNK..ci * CHUNK + chunk.len(), ..])
            .assign(&block);
    }
    Ok(EmbeddingTable {
        provenance: which,
        embeddings,
        identity: dataset.iter().map(|s| s.identity).collect(),
        gender: dataset.iter().map(|s| s.gender).collect(),
        age: dataset.iter().map(|s| s.age_group).collect(),
        race: dataset.iter().map(|s| s.race).collect(),
    })
}

pub fn cosine_score(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> Result<f64> {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(DebfaceError::ZeroNorm("cosine_score input".into()));
    }
    Ok(a.dot(b) / (na * nb))
}

/// Mann-Whitney AUC: probability a random genuine score exceeds a
/// random imposter score, ties counted one half.
pub fn roc_auc(scores: &[f64], genuine: &[bool]) -> Result<f64> {
    if scores.len() != genuine.len() {
        return Err(DebfaceError::ShapeMismatch("scores vs flags".into()));
    }
    let mut imposters: Vec<f64> = scores
        .iter()
        .zip(genuine)
        .filter(|(_, g)| !**g)
        .map(|(s, _)| *s)
        .collect();
    let genuines: Vec<f64> = scores
        .iter()
        .zip(genuine)
        .filter(|(_, g)| **g)
        .map(|(s, _)| *s)
        .collect();
    if genuines.is_empty() || imposters.is_empty() {
        return Err(DebfaceError::EmptyInput(
            "roc_auc needs both genuine and imposter scores".into(),
        ));
    }
    imposters.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut wins = 0.0f64;
    for g in &genuines {
        let below = imposters.partition_point(|s| s < g);
        let below_or_eq = imposters.partition_point(|s| s <= g);
        wins += below as f64 + 0.5 * (below_or_eq - below) as f64;
    }
    Ok(wins / (genuines.len() as f64 * imposters.len() as f64))
}

/// One verification pair of table row indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub genuine: bool,
}

/// Seeded pair-sampling policy: all genuine pairs up to a cap,
/// imposter pairs subsampled to a fixed multiple of the genuine count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairPolicy {
    pub genuine_cap: usize,
    pub imposter_ratio: usize,
    /// Minimum genuine and imposter pairs for a cohort to be reported.
    pub min_support: usize,
    /// Restrict cohort imposter pairs to the cohort itself (the
    /// alternative draws imposters from the whole table).
    pub intra_cohort_imposters: bool,
    pub seed: u64,
}

impl Default for PairPolicy {
    fn default() -> Self {
        Self {
            genuine_cap: 5000,
            imposter_ratio: 10,
            min_support: 10,
            intra_cohort_imposters: true,
            seed: 0,
        }
    }
}

fn subsample<T: Copy>(items: &[T], count: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<T> {
    if items.len() <= count {
        return items.to_vec();
    }
    let perm = rng::permutation(rng, items.len());
    let mut picked: Vec<usize> = perm[..count].to_vec();
    picked.sort_unstable();
    picked.iter().map(|&i| items[i]).collect()
}

/// Deterministic genuine + imposter pairs over the given table rows.
pub fn build_pairs(
    identity: &[usize],
    rows: &[usize],
    policy: &PairPolicy,
    domain_counter: u64,
) -> Vec<Pair> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &r in rows {
        by_id.entry(identity[r]).or_default().push(r);
    }
    let mut genuine: Vec<(usize, usize)> = Vec::new();
    for idxs in by_id.values() {
        for i in 0..idxs.len() {
            for j in i + 1..idxs.len() {
                genuine.push((idxs[i], idxs[j]));
            }
        }
    }
    let mut grng = rng::stream(policy.seed, "pairs-genuine", &[domain_counter]);
    let genuine = subsample(&genuine, policy.genuine_cap, &mut grng);
    let target = genuine.len() * policy.imposter_ratio;

    let mut irng = rng::stream(policy.seed, "pairs-imposter", &[domain_counter]);
    let imposters: Vec<(usize, usize)> = if rows.len() <= 1000 {
        // Small groups: enumerate all imposter pairs, then subsample.
        let mut all = Vec::new();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                if identity[rows[i]] != identity[rows[j]] {
                    all.push((rows[i], rows[j]));
                }
            }
        }
        subsample(&all, target, &mut irng)
    } else {
        // Large groups: rejection-sample distinct pairs.
        use rand::Rng as _;
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(target);
        let mut attempts = 0usize;
        let max_attempts = target.saturating_mul(50).max(1000);
        while out.len() < target && attempts < max_attempts {
            attempts += 1;
            let i = rows[irng.random_range(0..rows.len())];
            let j = rows[irng.random_range(0..rows.len())];
            let (lo, hi) = (i.min(j), i.max(j));
            if lo == hi || identity[lo] == identity[hi] {
                continue;
            }
            if seen.insert((lo, hi)) {
                out.push((lo, hi));
            }
        }
        out
    };

    let mut pairs: Vec<Pair> = genuine
        .iter()
        .map(|&(a, b)| Pair {
            a,
            b,
            genuine: true,
        })
        .collect();
    pairs.extend(imposters.iter().map(|&(a, b)| Pair {
        a,
        b,
        genuine: false,
    }));
    pairs
}

fn pair_scores(table: &EmbeddingTable, pairs: &[Pair]) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut scores = Vec::with_capacity(pairs.len());
    let mut flags = Vec::with_capacity(pairs.len());
    for p in pairs {
        scores.push(cosine_score(
            &table.embeddings.row(p.a),
            &table.embeddings.row(p.b),
        )?);
        flags.push(p.genuine);
    }
    Ok((scores, flags))
}

/// Per-cohort AUC plus pair counts; `auc` absent below minimum support.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortAuc {
    pub cohort: CohortKey,
    pub auc: Option<f64>,
    pub genuine_pairs: usize,
    pub imposter_pairs: usize,
    pub rows: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginalAuc {
    pub attribute: Attribute,
    pub value: usize,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasReport {
    pub provenance: Provenance,
    pub cohorts: Vec<CohortAuc>,
    pub marginals: Vec<MarginalAuc>,
    /// Population std over present full-cohort AUCs.
    pub biasness_overall: f64,
    /// Population std over present marginal AUCs per attribute.
    pub biasness_gender: f64,
    pub biasness_age: f64,
    pub biasness_race: f64,
}

/// Population standard deviation.
pub fn biasness(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(DebfaceError::EmptyInput("biasness".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

fn group_auc(
    table: &EmbeddingTable,
    rows: &[usize],
    policy: &PairPolicy,
    domain_counter: u64,
) -> Result<(Option<f64>, usize, usize)> {
    let pairs = build_pairs(&table.identity, rows, policy, domain_counter);
    let n_gen = pairs.iter().filter(|p| p.genuine).count();
    let n_imp = pairs.len() - n_gen;
    if n_gen < policy.min_support || n_imp < policy.min_support {
        return Ok((None, n_gen, n_imp));
    }
    let (scores, flags) = pair_scores(table, &pairs)?;
    Ok((Some(roc_auc(&scores, &flags)?), n_gen, n_imp))
}

/// Per-cohort verification AUC with biasness summaries.
pub fn cohort_auc_matrix(table: &EmbeddingTable, policy: &PairPolicy) -> Result<BiasReport> {
    if table.is_empty() {
        return Err(DebfaceError::EmptyInput("cohort_auc_matrix".into()));
    }
    let mut by_cohort: BTreeMap<CohortKey, Vec<usize>> = BTreeMap::new();
    for i in 0..table.len() {
        by_cohort.entry(table.cohort(i)).or_default().push(i);
    }
    let mut cohorts = Vec::new();
    for (ci, (key, rows)) in by_cohort.iter().enumerate() {
        let (auc, n_gen, n_imp) = if policy.intra_cohort_imposters {
            group_auc(table, rows, policy, ci as u64)?
        } else {
            // Alternative: genuine pairs from the cohort, imposters
            // drawn from the whole table.
            cohort_auc_global_imposters(table, rows, policy, ci as u64)?
        };
        cohorts.push(CohortAuc {
            cohort: *key,
            auc,
            genuine_pairs: n_gen,
            imposter_pairs: n_imp,
            rows: rows.len(),
        });
    }

    let mut marginals = Vec::new();
    let mut counter = 1000u64;
    for attr in [Attribute::Gender, Attribute::Age, Attribute::Race] {
        let values: BTreeSet<usize> = (0..table.len())
            .map(|i| table.attr_label(attr, i))
            .collect();
        for v in values {
            let rows: Vec<usize> = (0..table.len())
                .filter(|&i| table.attr_label(attr, i) == v)
                .collect();
            let (auc, _, _) = group_auc(table, &rows, policy, counter)?;
            counter += 1;
            marginals.push(MarginalAuc {
                attribute: attr,
                value: v,
                auc,
            });
        }
    }

    let present: Vec<f64> = cohorts.iter().filter_map(|c| c.auc).collect();
    let biasness_overall = if present.is_empty() {
        0.0
    } else {
        biasness(&present)?
    };
    let marginal_bias = |attr: Attribute| -> Result<f64> {
        let vals: Vec<f64> = marginals
            .iter()
            .filter(|m| m.attribute == attr)
            .filter_map(|m| m.auc)
            .collect();
        if vals.is_empty() {
            Ok(0.0)
        } else {
            biasness(&vals)
        }
    };
    Ok(BiasReport {
        provenance: table.provenance,
        cohorts,
        biasness_overall,
        biasness_gender: marginal_bias(Attribute::Gender)?,
        biasness_age: marginal_bias(Attribute::Age)?,
        biasness_race: marginal_bias(Attribute::Race)?,
        marginals,
    })
}

fn cohort_auc_global_imposters(
    table: &EmbeddingTable,
    cohort_rows: &[usize],
    policy: &PairPolicy,
    domain_counter: u64,
) -> Result<(Option<f64>, usize, usize)> {
    let genuine_only = PairPolicy {
        imposter_ratio: 0,
        ..*policy
    };
    let genuine = build_pairs(&table.identity, cohort_rows, &genuine_only, domain_counter);
    let all_rows: Vec<usize> = (0..table.len()).collect();
    let imposter_policy = PairPolicy {
        genuine_cap: genuine.len(),
        ..*policy
    };
    let global = build_pairs(&table.identity, &all_rows, &imposter_policy, domain_counter);
    let mut pairs = genuine;
    pairs.extend(global.into_iter().filter(|p| !p.genuine));
    let n_gen = pairs.iter().filter(|p| p.genuine).count();
    let n_imp = pairs.len() - n_gen;
    if n_gen < policy.min_support || n_imp < policy.min_support {
        return Ok((None, n_gen, n_imp));
    }
    let (scores, flags) = pair_scores(table, &pairs)?;
    Ok((Some(roc_auc(&scores, &flags)?), n_gen, n_imp))
}

/// Train a small probe on frozen features and return held-out accuracy.
/// `hidden = None` uses a linear probe; `Some(h)` a two-layer MLP.
///
/// With `groups` given, the stratified 80/20 split is group-disjoint
/// (e.g. identity-disjoint): rows of one group land entirely in
/// probe-train or probe-test, so the probe cannot score by memorizing
/// per-group clusters and must find structure that transfers.
pub fn probe_accuracy(
    x: &ArrayView2<f64>,
    labels: &[usize],
    seed: u64,
    hidden: Option<usize>,
    groups: Option<&[usize]>,
) -> Result<f64> {
    let n = labels.len();
    if n == 0 || x.nrows() != n {
        return Err(DebfaceError::EmptyInput("probe_accuracy".into()));
    }
    if let Some(g) = groups {
        if g.len() != n {
            return Err(DebfaceError::ShapeMismatch("probe groups vs labels".into()));
        }
    }
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(DebfaceError::InvalidSpec(
            "probe needs at least two classes".into(),
        ));
    }
    let k = labels.iter().max().unwrap() + 1;

    // Stratified 80/20 split, seeded per class. Split units are
    // single rows, or whole groups when `groups` is given.
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for &c in &classes {
        let units: Vec<Vec<usize>> = match groups {
            None => (0..n)
                .filter(|&i| labels[i] == c)
                .map(|i| vec![i])
                .collect(),
            Some(g) => {
                let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for i in (0..n).filter(|&i| labels[i] == c) {
                    by_group.entry(g[i]).or_default().push(i);
                }
                by_group.into_values().collect()
            }
        };
        let mut srng = rng::stream(seed, "probe-split", &[c as u64]);
        let perm = rng::permutation(&mut srng, units.len());
        let n_test = units.len() / 5;
        for (pos, &p) in perm.iter().enumerate() {
            if pos < n_test {
                test_idx.extend(&units[p]);
            } else {
                train_idx.extend(&units[p]);
            }
        }
    }
    if test_idx.is_empty() {
        return Err(DebfaceError::InvalidSpec(
            "probe test split is empty; need >= 5 rows per class".into(),
        ));
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    // Standardize with train statistics.
    let dim = x.ncols();
    let mut mean = Array1::<f64>::zeros(dim);
    for &i in &train_idx {
        mean += &x.row(i);
    }
    mean /= train_idx.len() as f64;
    let mut var = Array1::<f64>::zeros(dim);
    for &i in &train_idx {
        let d = &x.row(i) - &mean;
        var += &d.mapv(|v| v * v);
    }
    var /= train_idx.len() as f64;
    let std = var.mapv(|v| v.sqrt().max(1e-6));
    let norm_row = |i: usize| -> Array1<f64> { (&x.row(i) - &mean) / &std };

    let mut prng = rng::stream(seed, "probe-init", &[]);
    let mut l1 = match hidden {
        Some(h) => Linear::init(h, dim, &mut prng),
        None => Linear::init(k, dim, &mut prng),
    };
    let mut l2 = hidden.map(|h| Linear::init(k, h, &mut prng));
    let mut v1 = Linear::zeros(l1.out_dim(), l1.in_dim());
    let mut v2 = l2.as_ref().map(|l| Linear::zeros(l.out_dim(), l.in_dim()));

    const EPOCHS: usize = 100;
    const BATCH: usize = 64;
    for epoch in 0..EPOCHS {
        let mut erng = rng::stream(seed, "probe-epoch", &[epoch as u64]);
        let order = rng::permutation(&mut erng, train_idx.len());
        for chunk in order.chunks(BATCH) {
            let m = chunk.len();
            let mut xb = Array2::zeros((m, dim));
            for (r, &o) in chunk.iter().enumerate() {
                xb.row_mut(r).assign(&norm_row(train_idx[o]));
            }
            let (h_act, logits) = match (&l2, hidden) {
                (Some(l2), Some(_)) => {
                    let mut h = l1.forward(&xb.view());
                    h.mapv_inplace(|v| v.max(0.0));
                    let logits = l2.forward(&h.view());
                    (Some(h), logits)
                }
                _ => (None, l1.forward(&xb.view())),
            };
            let mut d_logits = Array2::zeros(logits.raw_dim());
            for (r, &o) in chunk.iter().enumerate() {
                let (_, g) = losses::cross_entropy_with_grad(&logits.row(r), labels[train_idx[o]])?;
                d_logits.row_mut(r).assign(&(g / m as f64));
            }
            match (&mut l2, &h_act) {
                (Some(l2m), Some(h)) => {
                    let (g2, mut dh) = l2m.backward(&h.view(), &d_logits.view());
                    ndarray::Zip::from(&mut dh).and(h).for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    let (g1, _) = l1.backward(&xb.view(), &dh.view());
                    sgd_probe(&mut l1, &g1.w, &g1.b, &mut v1);
                    sgd_probe(l2m, &g2.w, &g2.b, v2.as_mut().unwrap());
                }
                _ => {
                    let (g1, _) = l1.backward(&xb.view(), &d_logits.view());
                    sgd_probe(&mut l1, &g1.w, &g1.b, &mut v1);
                }
            }
        }
    }

    let mut correct = 0usize;
    for &i in &test_idx {
        let xi = norm_row(i);
        let logits = match &l2 {
            Some(l2) => {
                let mut h = l1.forward1(&xi.view());
                h.mapv_inplace(|v| v.max(0.0));
                l2.forward1(&h.view())
            }
            None => l1.forward1(&xi.view()),
        };
        let pred = argmax(&logits.view());
        if pred == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_idx.len() as f64)
}

fn sgd_probe(l: &mut Linear, gw: &Array2<f64>, gb: &Array1<f64>, v: &mut Linear) {
    const LR: f64 = 0.1;
    const MOMENTUM: f64 = 0.9;
    ndarray::Zip::from(&mut l.w)
        .and(gw)
        .and(&mut v.w)
        .for_each(|p, g, v| {
            *v = MOMENTUM * *v + g;
            *p -= LR * *v;
        });
    ndarray::Zip::from(&mut l.b)
        .and(gb)
        .and(&mut v.b)
        .for_each(|p, g, v| {
            *v = MOMENTUM * *v + g;
            *p -= LR * *v;
        });
}

fn argmax(v: &ArrayView1<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Number of independently split-and-initialized probes averaged by
/// `leakage_probe`. Averaging damps the split-lottery variance of a
/// single small held-out identity set.
const PROBE_REPS: u64 = 5;

/// How much demographic signal a two-layer probe can still read out of
/// frozen embeddings. The probe split is identity-disjoint so tight
/// identity clusters cannot be memorized into demographic predictions,
/// and the returned accuracy is the mean over several seeded
/// split/init repetitions.
pub fn leakage_probe(table: &EmbeddingTable, attribute: Attribute, seed: u64) -> Result<f64> {
    let labels: Vec<usize> = (0..table.len())
        .map(|i| table.attr_label(attribute, i))
        .collect();
    let mut total = 0.0;
    for rep in 0..PROBE_REPS {
        let rep_seed = rng::stream(seed, "probe-rep", &[rep]).random::<u64>();
        total += probe_accuracy(
            &table.embeddings.view(),
            &labels,
            rep_seed,
            Some(32),
            Some(&table.identity),
        )?;
    }
    Ok(total / PROBE_REPS as f64)
}

/// Smallest score threshold whose realized FAR is at or below the
/// target; ties push the threshold up (conservative).
pub fn threshold_at_far(imposter_scores: &[f64], far: f64) -> Result<f64> {
    if imposter_scores.is_empty() {
        return Err(DebfaceError::EmptyInput("threshold_at_far".into()));
    }
    if !(0.0 < far && far < 1.0 || far == 1.0) {
        return Err(DebfaceError::InvalidSpec("far must be in (0,1]".into()));
    }
    let mut sorted = imposter_scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    // Candidate thresholds are the distinct score values, ascending:
    // the smallest qualifying value wins.
    let mut prev = f64::NAN;
    for (i, &t) in sorted.iter().enumerate() {
        if t == prev {
            continue;
        }
        prev = t;
        let accepted = sorted.len() - i; // scores >= t
        if accepted as f64 / n <= far {
            return Ok(t);
        }
    }
    // Even the maximum accepts too many (its tie group is too large):
    // step just above it so nothing is accepted.
    let max = *sorted.last().unwrap();
    Ok(next_up(max))
}

fn next_up(v: f64) -> f64 {
    if v.is_nan() || v == f64::INFINITY {
        return v;
    }
    let bits = if v == 0.0 {
        1
    } else if v > 0.0 {
        v.to_bits() + 1
    } else {
        v.to_bits() - 1
    };
    f64::from_bits(bits)
}

/// Unordered group-pair shares of false accepts for one attribute.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FalseAcceptMatrix {
    pub attribute: Attribute,
    pub cardinality: usize,
    /// percent[min(g1,g2)][max(g1,g2)]; sums to 100 over the upper
    /// triangle including the diagonal when false accepts exist.
    pub percent: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossDemographicReport {
    pub provenance: Provenance,
    pub far: f64,
    pub threshold: f64,
    pub total_false_accepts: usize,
    pub no_false_accepts: bool,
    pub matrices: Vec<FalseAcceptMatrix>,
    /// Share (percent) of false accepts whose members differ in at
    /// least one demographic attribute.
    pub heterogeneous_share: f64,
}

/// Decompose false accepts at the global FAR threshold by the
/// demographic groups of the two pair members.
pub fn cross_demographic_false_accepts(
    table: &EmbeddingTable,
    policy: &PairPolicy,
    far: f64,
) -> Result<CrossDemographicReport> {
    let all_rows: Vec<usize> = (0..table.len()).collect();
    let pairs = build_pairs(&table.identity, &all_rows, policy, u64::MAX);
    let imposters: Vec<&Pair> = pairs.iter().filter(|p| !p.genuine).collect();
    if imposters.is_empty() {
        return Err(DebfaceError::EmptyInput(
            "cross_demographic_false_accepts needs imposter pairs".into(),
        ));
    }
    let scores: Vec<f64> = imposters
        .iter()
        .map(|p| cosine_score(&table.embeddings.row(p.a), &table.embeddings.row(p.b)))
        .collect::<Result<_>>()?;
    let threshold = threshold_at_far(&scores, far)?;
    let accepted: Vec<&&Pair> = imposters
        .iter()
        .zip(&scores)
        .filter(|(_, s)| **s >= threshold)
        .map(|(p, _)| p)
        .collect();
    let total = accepted.len();
    let no_false_accepts = total == 0;

    let mut matrices = Vec::new();
    let mut hetero = 0usize;
    for p in &accepted {
        if table.cohort(p.a) != table.cohort(p.b) {
            hetero += 1;
        }
    }
    for attr in [Attribute::Gender, Attribute::Age, Attribute::Race] {
        let k = 1
            + (0..table.len())
                .map(|i| table.attr_label(attr, i))
                .max()
                .unwrap_or(0);
        let mut counts = vec![vec![0usize; k]; k];
        for p in &accepted {
            let (g1, g2) = (table.attr_label(attr, p.a), table.attr_label(attr, p.b));
            counts[g1.min(g2)][g1.max(g2)] += 1;
        }
        let percent = counts
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&c| {
                        if total == 0 {
                            0.0
                        } else {
                            100.0 * c as f64 / total as f64
                        }
                    })
                    .collect()
            })
            .collect();
        matrices.push(FalseAcceptMatrix {
            attribute: attr,
            cardinality: k,
            percent,
        });
    }
    Ok(CrossDemographicReport {
        provenance: table.provenance,
        far,
        threshold,
        total_false_accepts: total,
        no_false_accepts,
        matrices,
        heterogeneous_share: if total == 0 {
            0.0
        } else {
            100.0 * hetero as f64 / total as f64
        },
    })
}

/// Same/different pattern over (gender, age, race) for an imposter pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HomogeneityPattern {
    pub same_gender: bool,
    pub same_age: bool,
    pub same_race: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionPercentile {
    pub pattern: HomogeneityPattern,
    pub pairs: usize,
    /// Absent when the partition has fewer than 10 pairs.
    pub percentile_score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PercentileReport {
    pub provenance: Provenance,
    pub percentile: f64,
    pub partitions: Vec<PartitionPercentile>,
    /// Max minus min percentile score over present partitions.
    pub spread: f64,
}

/// Nearest-rank percentile: the ceil(p/100 * n)-th smallest value.
pub fn nearest_rank_percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(DebfaceError::EmptyInput("nearest_rank_percentile".into()));
    }
    if !(0.0 < p && p <= 100.0) {
        return Err(DebfaceError::InvalidSpec(
            "percentile must be in (0,100]".into(),
        ));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((p / 100.0 * sorted.len() as f64).ceil() as usize).max(1);
    Ok(sorted[rank - 1])
}

/// Top-decile imposter score per homogeneity partition.
pub fn imposter_percentile_by_homogeneity(
    table: &EmbeddingTable,
    policy: &PairPolicy,
    percentile: f64,
) -> Result<PercentileReport> {
    let all_rows: Vec<usize> = (0..table.len()).collect();
    let pairs = build_pairs(&table.identity, &all_rows, policy, u64::MAX);
    let mut partitions: BTreeMap<HomogeneityPattern, Vec<f64>> = BTreeMap::new();
    for p in pairs.iter().filter(|p| !p.genuine) {
        let pattern = HomogeneityPattern {
            same_gender: table.gender[p.a] == table.gender[p.b],
            same_age: table.age[p.a] == table.age[p.b],
            same_race: table.race[p.a] == table.race[p.b],
        };
        let score = cosine_score(&table.embeddings.row(p.a), &table.embeddings.row(p.b))?;
        partitions.entry(pattern).or_default().push(score);
    }
    if partitions.is_empty() {
        return Err(DebfaceError::EmptyInput(
            "imposter_percentile_by_homogeneity needs imposter pairs".into(),
        ));
    }
    const MIN_PAIRS: usize = 10;
    let mut out = Vec::new();
    let mut present = Vec::new();
    for (pattern, scores) in &partitions {
        let value = if scores.len() < MIN_PAIRS {
            None
        } else {
            let v = nearest_rank_percentile(scores, percentile)?;
            present.push(v);
            Some(v)
        };
        out.push(PartitionPercentile {
            pattern: *pattern,
            pairs: scores.len(),
            percentile_score: value,
        });
    }
    let spread = if present.is_empty() {
        0.0
    } else {
        let max = present.iter().cloned().fold(f64::MIN, f64::max);
        let min = present.iter().cloned().fold(f64::MAX, f64::min);
        max - min
    };
    Ok(PercentileReport {
        provenance: table.provenance,
        percentile,
        partitions: out,
        spread,
    })
}

/// Accuracy of one demographic head over the cohorts of the other two
/// attributes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationCell {
    /// Values of the two non-predicted attributes, in ALL_ATTRIBUTES
    /// order with the predicted one removed.
    pub other_values: (usize, usize),
    pub accuracy: Option<f64>,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationBias {
    pub attribute: Attribute,
    pub cells: Vec<EstimationCell>,
    pub biasness: f64,
    pub overall_accuracy: f64,
}

/// Per-cohort accuracy of each demographic head of a debface model.
pub fn demographic_estimation_bias(
    ckpt: &ModelCheckpoint,
    dataset: &[LabeledSample],
) -> Result<Vec<EstimationBias>> {
    ckpt.require_mode(Mode::Debface)?;
    if dataset.is_empty() {
        return Err(DebfaceError::EmptyInput(
            "demographic_estimation_bias".into(),
        ));
    }
    let d = ckpt.net.block_dim;
    // Forward once; predict with each head on its own block.
    let mut preds: BTreeMap<Attribute, Vec<usize>> = BTreeMap::new();
    const CHUNK: usize = 64;
    for chunk in dataset.chunks(CHUNK) {
        let refs: Vec<&LabeledSample> = chunk.iter().collect();
        let images = stack_images(&refs)?;
        let (flat, _) = ckpt.encoder.forward_batch(&images)?;
        for attr in [Attribute::Gender, Attribute::Age, Attribute::Race] {
            let lin = ckpt.heads.demo_head(attr).unwrap();
            let block = flat.slice(s![.., block_range(attr, d)]);
            let logits = lin.forward(&block);
            let e = preds.entry(attr).or_default();
            for row in logits.axis_iter(Axis(0)) {
                e.push(argmax(&row));
            }
        }
    }
    let label_of = |attr: Attribute, s: &LabeledSample| match attr {
        Attribute::Gender => s.gender,
        Attribute::Age => s.age_group,
        Attribute::Race => s.race,
        Attribute::Identity => s.identity,
    };
    let mut out = Vec::new();
    for attr in [Attribute::Gender, Attribute::Age, Attribute::Race] {
        let others: Vec<Attribute> = [Attribute::Gender, Attribute::Age, Attribute::Race]
            .into_iter()
            .filter(|a| *a != attr)
            .collect();
        let p = &preds[&attr];
        let mut cells: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
        let mut total_correct = 0usize;
        for (i, s) in dataset.iter().enumerate() {
            let key = (label_of(others[0], s), label_of(others[1], s));
            let cell = cells.entry(key).or_insert((0, 0));
            cell.1 += 1;
            if p[i] == label_of(attr, s) {
                cell.0 += 1;
                total_correct += 1;
            }
        }
        let cell_list: Vec<EstimationCell> = cells
            .iter()
            .map(|(&k, &(correct, n))| EstimationCell {
                other_values: k,
                accuracy: if n == 0 {
                    None
                } else {
                    Some(correct as f64 / n as f64)
                },
                samples: n,
            })
            .collect();
        let present: Vec<f64> = cell_list.iter().filter_map(|c| c.accuracy).collect();
        out.push(EstimationBias {
            attribute: attr,
            biasness: if present.is_empty() {
                0.0
            } else {
                biasness(&present)?
            },
            overall_accuracy: total_correct as f64 / dataset.len() as f64,
            cells: cell_list,
        });
    }
    Ok(out)
}
