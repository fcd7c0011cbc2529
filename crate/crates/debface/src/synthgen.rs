//! Deterministic synthetic image datasets with controllable cohort
//! imbalance.
//!
//! Each identity owns one fixed demographic triple and one smooth base
//! pattern. Demographic attributes contribute additive pixel signals
//! living in mutually distinct subspaces (gender: grating orientation,
//! race: channel tint, age: phase of a pure-vertical brightness
//! profile; identity components avoid the pure-vertical band), so each
//! attribute is individually linearly decodable from raw pixels and
//! separable from the identity pattern. Per-sample Gaussian noise is
//! the only intra-identity variation.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DebfaceError, Result};
use crate::rng;

/// One demographic cohort: a (gender, age-group, race) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CohortKey {
    pub gender: usize,
    pub age_group: usize,
    pub race: usize,
}

impl CohortKey {
    pub fn new(gender: usize, age_group: usize, race: usize) -> Self {
        Self {
            gender,
            age_group,
            race,
        }
    }
}

/// Full description of a synthetic dataset; `make_dataset` is a pure
/// function of this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub gender_cardinality: usize,
    pub age_cardinality: usize,
    pub race_cardinality: usize,
    /// Sampling proportions per cohort; need not be normalized.
    /// Serialized as a string-keyed map `"gender-age-race" = weight`.
    #[serde(with = "cohort_weight_map")]
    pub cohort_weights: BTreeMap<CohortKey, f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

mod cohort_weight_map {
    use super::CohortKey;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<CohortKey, f64>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        let string_keyed: BTreeMap<String, f64> = map
            .iter()
            .map(|(k, v)| (format!("{}-{}-{}", k.gender, k.age_group, k.race), *v))
            .collect();
        serde::Serialize::serialize(&string_keyed, ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> Result<BTreeMap<CohortKey, f64>, D::Error> {
        let string_keyed = BTreeMap::<String, f64>::deserialize(de)?;
        let mut out = BTreeMap::new();
        for (k, v) in string_keyed {
            let parts: Vec<&str> = k.split('-').collect();
            let parsed: Option<Vec<usize>> = parts.iter().map(|p| p.parse().ok()).collect();
            match parsed.as_deref() {
                Some([g, a, r]) if parts.len() == 3 => {
                    out.insert(CohortKey::new(*g, *a, *r), v);
                }
                _ => {
                    return Err(D::Error::custom(format!(
                        "bad cohort key `{k}`, expected `gender-age-race`"
                    )))
                }
            }
        }
        Ok(out)
    }
}

// Additive mix weights of the four pixel signals. They sum to 1 so the
// clean image stays inside [0,1] before noise.
const W_IDENTITY: f64 = 0.25;
const W_GENDER: f64 = 0.25;
const W_AGE: f64 = 0.25;
const W_RACE: f64 = 0.25;

impl DatasetSpec {
    /// Desk-scale default: 32x32x3, 2 gender x 3 age x 3 race = 18
    /// cohorts, 200 identities x 20 images, paper-like imbalance.
    pub fn desk_default(seed: u64) -> Self {
        let mut spec = Self {
            image_height: 32,
            image_width: 32,
            channels: 3,
            num_identities: 200,
            images_per_identity: 20,
            gender_cardinality: 2,
            age_cardinality: 3,
            race_cardinality: 3,
            cohort_weights: BTreeMap::new(),
            noise_sigma: 0.4,
            seed,
        };
        spec.cohort_weights = paper_like_weights(2, 3, 3);
        spec
    }

    pub fn total_samples(&self) -> usize {
        self.num_identities * self.images_per_identity
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_height == 0
            || self.image_width == 0
            || self.channels == 0
            || self.num_identities == 0
            || self.images_per_identity == 0
        {
            return Err(DebfaceError::InvalidSpec(
                "image dimensions and counts must be positive".into(),
            ));
        }
        if self.gender_cardinality < 2 || self.age_cardinality < 2 || self.race_cardinality < 2 {
            return Err(DebfaceError::InvalidSpec(
                "attribute cardinalities must be at least 2".into(),
            ));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(DebfaceError::InvalidSpec(
                "noise_sigma must be a nonnegative finite real".into(),
            ));
        }
        let mut total = 0.0;
        let mut nonzero = 0usize;
        for (key, w) in &self.cohort_weights {
            if key.gender >= self.gender_cardinality
                || key.age_group >= self.age_cardinality
                || key.race >= self.race_cardinality
            {
                return Err(DebfaceError::InvalidSpec(format!(
                    "cohort key {key:?} outside declared cardinalities"
                )));
            }
            if !w.is_finite() || *w < 0.0 {
                return Err(DebfaceError::InvalidSpec(
                    "cohort weights must be nonnegative finite reals".into(),
                ));
            }
            if *w > 0.0 {
                nonzero += 1;
                total += w;
            }
        }
        if nonzero == 0 || total <= 0.0 {
            return Err(DebfaceError::InvalidSpec(
                "cohort_weights must contain at least one positive weight".into(),
            ));
        }
        if self.num_identities < nonzero {
            return Err(DebfaceError::InvalidSpec(format!(
                "num_identities ({}) smaller than the number of nonzero-weight cohorts ({nonzero})",
                self.num_identities
            )));
        }
        Ok(())
    }
}

/// Uniform weight over the full cohort cross-product.
pub fn uniform_weights(genders: usize, ages: usize, races: usize) -> BTreeMap<CohortKey, f64> {
    let mut m = BTreeMap::new();
    for g in 0..genders {
        for a in 0..ages {
            for r in 0..races {
                m.insert(CohortKey::new(g, a, r), 1.0);
            }
        }
    }
    m
}

/// Imbalance preset mirroring a skewed web-collected corpus: race 0
/// holds ~60% of identities and age group 0 ~55%, gender is uniform.
pub fn paper_like_weights(genders: usize, ages: usize, races: usize) -> BTreeMap<CohortKey, f64> {
    let race_w = |r: usize| {
        if r == 0 {
            0.60
        } else {
            0.40 / (races - 1) as f64
        }
    };
    let age_w = |a: usize| {
        if a == 0 {
            0.55
        } else {
            0.45 / (ages - 1) as f64
        }
    };
    let mut m = BTreeMap::new();
    for g in 0..genders {
        for a in 0..ages {
            for r in 0..races {
                m.insert(
                    CohortKey::new(g, a, r),
                    race_w(r) * age_w(a) / genders as f64,
                );
            }
        }
    }
    m
}

/// One training/evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// (channels, height, width), values in [0,1].
    pub image: Array3<f32>,
    pub identity: usize,
    pub gender: usize,
    pub age_group: usize,
    pub race: usize,
}

impl LabeledSample {
    pub fn cohort(&self) -> CohortKey {
        CohortKey::new(self.gender, self.age_group, self.race)
    }
}

/// Largest-remainder apportionment of `total` units over the given
/// nonnegative weights. Ties on the fractional part go to the earlier
/// index. The returned counts sum to `total` exactly.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    assert!(sum > 0.0, "weights must have a positive sum");
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Sort by descending fractional part, index ascending on ties.
    order.sort_by(|&i, &j| {
        let fi = quotas[i] - quotas[i].floor();
        let fj = quotas[j] - quotas[j].floor();
        fj.partial_cmp(&fi).unwrap().then(i.cmp(&j))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Assign each identity a cohort following the spec's weights with
/// largest-remainder rounding. Identities are numbered cohort by cohort
/// in cohort key order.
pub fn identity_cohorts(spec: &DatasetSpec) -> Vec<CohortKey> {
    let cohorts: Vec<(&CohortKey, &f64)> = spec
        .cohort_weights
        .iter()
        .filter(|(_, w)| **w > 0.0)
        .collect();
    let weights: Vec<f64> = cohorts.iter().map(|(_, w)| **w).collect();
    let counts = largest_remainder(&weights, spec.num_identities);
    let mut out = Vec::with_capacity(spec.num_identities);
    for ((key, _), n) in cohorts.iter().zip(&counts) {
        out.extend(std::iter::repeat_n(**key, *n));
    }
    out
}

/// Generate the full dataset. Bit-identical output for identical specs.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    let cohorts = identity_cohorts(spec);
    let mut out = Vec::with_capacity(spec.total_samples());
    for (identity, cohort) in cohorts.iter().enumerate() {
        let clean = clean_image(spec, identity, *cohort);
        for sample_idx in 0..spec.images_per_identity {
            let image = if spec.noise_sigma > 0.0 {
                let mut rng = rng::stream(
                    spec.seed,
                    "sample-noise",
                    &[identity as u64, sample_idx as u64],
                );
                let mut img = clean.clone();
                for v in img.iter_mut() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *v = (*v as f64 + spec.noise_sigma * n).clamp(0.0, 1.0) as f32;
                }
                img
            } else {
                clean.clone()
            };
            out.push(LabeledSample {
                image,
                identity,
                gender: cohort.gender,
                age_group: cohort.age_group,
                race: cohort.race,
            });
        }
    }
    Ok(out)
}

/// Noise-free image of one identity: base pattern + attribute signals,
/// clamped to [0,1].
fn clean_image(spec: &DatasetSpec, identity: usize, cohort: CohortKey) -> Array3<f32> {
    let (c, h, w) = (spec.channels, spec.image_height, spec.image_width);
    let mut id_rng = rng::stream(spec.seed, "identity-pattern", &[identity as u64]);

    // Identity base: a few random low-frequency sinusoids.
    const COMPONENTS: usize = 4;
    let mut comps = Vec::with_capacity(COMPONENTS);
    let mut amp_sum = 0.0;
    for _ in 0..COMPONENTS {
        // fx starts at 1 so identity components never collide with the
        // pure-vertical age profile.
        let fx = id_rng.random_range(1..=3) as f64;
        let fy = id_rng.random_range(0..=3) as f64;
        let phase: f64 = id_rng.random_range(0.0..2.0 * PI);
        let amp: f64 = id_rng.random_range(0.5..1.0);
        amp_sum += amp;
        comps.push((fx, fy, phase, amp));
    }

    // Gender: low-frequency grating whose orientation keys the label.
    let theta = PI * (cohort.gender as f64 + 0.5) / spec.gender_cardinality as f64;
    let grating_freq = 3.0;

    // Age: pure-vertical brightness profile whose phase keys the label.
    let age_phase = 2.0 * PI * cohort.age_group as f64 / spec.age_cardinality as f64;

    // Race: per-channel tint.
    let tint: Vec<f64> = (0..c)
        .map(|ch| {
            let angle = 2.0 * PI * cohort.race as f64 / spec.race_cardinality as f64
                + 2.0 * PI * ch as f64 / c.max(1) as f64;
            0.5 + 0.5 * angle.cos()
        })
        .collect();

    let mut img = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let xn = x as f64 / w as f64;
                let yn = y as f64 / h as f64;
                let base: f64 = comps
                    .iter()
                    .map(|(fx, fy, phase, amp)| {
                        amp * (2.0 * PI * (fx * xn + fy * yn) + phase).sin()
                    })
                    .sum::<f64>()
                    / amp_sum;
                let base01 = 0.5 + 0.5 * base;
                let grat01 = 0.5
                    + 0.5 * (2.0 * PI * grating_freq * (xn * theta.cos() + yn * theta.sin())).sin();
                let grad01 = 0.5 + 0.5 * (2.0 * PI * yn + age_phase).sin();
                let v =
                    W_IDENTITY * base01 + W_GENDER * grat01 + W_AGE * grad01 + W_RACE * tint[ch];
                img[[ch, y, x]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// Count samples per cohort.
pub fn cohort_counts(dataset: &[LabeledSample]) -> Result<BTreeMap<CohortKey, usize>> {
    if dataset.is_empty() {
        return Err(DebfaceError::EmptyInput("cohort_counts".into()));
    }
    let mut counts = BTreeMap::new();
    for s in dataset {
        *counts.entry(s.cohort()).or_insert(0) += 1;
    }
    Ok(counts)
}

/// Identity-disjoint, per-cohort stratified train/test split.
///
/// With `strict` set, a nonzero cohort that would contribute zero test
/// identities is an error instead of being silently absorbed into train.
pub fn split_by_identity(
    dataset: &[LabeledSample],
    train_fraction: f64,
    seed: u64,
    strict: bool,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DebfaceError::InvalidSpec(
            "train_fraction must be in (0,1)".into(),
        ));
    }
    // identity -> cohort, preserving first-seen consistency.
    let mut identity_cohort: BTreeMap<usize, CohortKey> = BTreeMap::new();
    for s in dataset {
        identity_cohort
            .entry(s.identity)
            .or_insert_with(|| s.cohort());
    }
    if identity_cohort.len() < 2 {
        return Err(DebfaceError::InvalidSpec(
            "split requires at least 2 identities".into(),
        ));
    }
    let mut by_cohort: BTreeMap<CohortKey, Vec<usize>> = BTreeMap::new();
    for (id, key) in &identity_cohort {
        by_cohort.entry(*key).or_default().push(*id);
    }
    let mut train_ids = std::collections::BTreeSet::new();
    for (ci, (key, ids)) in by_cohort.iter().enumerate() {
        let n = ids.len();
        let n_train = ((train_fraction * n as f64).round() as usize).min(n);
        if strict && n_train == n {
            return Err(DebfaceError::InvalidSpec(format!(
                "strict stratification: cohort {key:?} would receive zero test identities"
            )));
        }
        let mut rng = rng::stream(seed, "identity-split", &[ci as u64]);
        let perm = rng::permutation(&mut rng, n);
        for &p in perm.iter().take(n_train) {
            train_ids.insert(ids[p]);
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for s in dataset {
        if train_ids.contains(&s.identity) {
            train.push(s.clone());
        } else {
            test.push(s.clone());
        }
    }
    Ok((train, test))
}

// ---------------------------------------------------------------------
// On-disk form: manifest + packed little-endian f32 tensor file.
// ---------------------------------------------------------------------

pub const PACK_MAGIC: u32 = 0x4642_4544; // "DEBF"
pub const PACK_VERSION: u32 = 1;
pub const PACK_DTYPE_F32: u32 = 1;
pub const PACK_FILE: &str = "images.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Write `manifest.txt` and `images.bin` into `dir`.
pub fn write_dataset(
    dir: &std::path::Path,
    spec: &DatasetSpec,
    dataset: &[LabeledSample],
) -> Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(dir).map_err(|e| DebfaceError::io(dir, e))?;
    let (c, h, w) = (spec.channels, spec.image_height, spec.image_width);

    let pack_path = dir.join(PACK_FILE);
    let mut pack = std::io::BufWriter::new(
        std::fs::File::create(&pack_path).map_err(|e| DebfaceError::io(&pack_path, e))?,
    );
    let header = [
        PACK_MAGIC,
        PACK_VERSION,
        dataset.len() as u32,
        c as u32,
        h as u32,
        w as u32,
        PACK_DTYPE_F32,
        0,
    ];
    for v in header {
        pack.write_all(&v.to_le_bytes())
            .map_err(|e| DebfaceError::io(&pack_path, e))?;
    }
    for s in dataset {
        for v in s.image.iter() {
            pack.write_all(&v.to_le_bytes())
                .map_err(|e| DebfaceError::io(&pack_path, e))?;
        }
    }
    pack.flush().map_err(|e| DebfaceError::io(&pack_path, e))?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let mut man = String::new();
    man.push_str(&format!(
        "{h} {w} {c} {} {} {}\n",
        spec.gender_cardinality, spec.age_cardinality, spec.race_cardinality
    ));
    for (i, s) in dataset.iter().enumerate() {
        man.push_str(&format!(
            "{PACK_FILE}:{i} {} {} {} {}\n",
            s.identity, s.gender, s.age_group, s.race
        ));
    }
    std::fs::write(&manifest_path, man).map_err(|e| DebfaceError::io(&manifest_path, e))?;
    Ok(())
}

/// Dataset dimensions recovered from a manifest header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub genders: usize,
    pub ages: usize,
    pub races: usize,
}

/// Read a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &std::path::Path) -> Result<(DatasetDims, Vec<LabeledSample>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(DebfaceError::MissingArtifact(manifest_path));
    }
    let text =
        std::fs::read_to_string(&manifest_path).map_err(|e| DebfaceError::io(&manifest_path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| DebfaceError::Malformed {
        path: manifest_path.clone(),
        reason: "empty manifest".into(),
    })?;
    let hv: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| DebfaceError::Malformed {
            path: manifest_path.clone(),
            reason: "bad manifest header".into(),
        })?;
    if hv.len() != 6 {
        return Err(DebfaceError::Malformed {
            path: manifest_path.clone(),
            reason: "manifest header must have 6 fields".into(),
        });
    }
    let dims = DatasetDims {
        height: hv[0],
        width: hv[1],
        channels: hv[2],
        genders: hv[3],
        ages: hv[4],
        races: hv[5],
    };

    let pack_path = dir.join(PACK_FILE);
    if !pack_path.exists() {
        return Err(DebfaceError::MissingArtifact(pack_path));
    }
    let bytes = std::fs::read(&pack_path).map_err(|e| DebfaceError::io(&pack_path, e))?;
    let malformed = |reason: &str| DebfaceError::Malformed {
        path: pack_path.clone(),
        reason: reason.into(),
    };
    if bytes.len() < 32 {
        return Err(malformed("truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != PACK_MAGIC {
        return Err(malformed("bad magic"));
    }
    if word(1) != PACK_VERSION || word(6) != PACK_DTYPE_F32 {
        return Err(malformed("unsupported version or dtype"));
    }
    let count = word(2) as usize;
    let (c, h, w) = (word(3) as usize, word(4) as usize, word(5) as usize);
    if (c, h, w) != (dims.channels, dims.height, dims.width) {
        return Err(malformed("pack dimensions disagree with manifest"));
    }
    let per = c * h * w;
    if bytes.len() != 32 + 4 * count * per {
        return Err(malformed("payload length mismatch"));
    }

    let mut samples = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 5 {
            return Err(DebfaceError::Malformed {
                path: manifest_path.clone(),
                reason: format!("sample line {i} must have 5 fields"),
            });
        }
        let parse = |t: &str| {
            t.parse::<usize>().map_err(|_| DebfaceError::Malformed {
                path: manifest_path.clone(),
                reason: format!("bad integer on sample line {i}"),
            })
        };
        let mut data = Vec::with_capacity(per);
        let off = 32 + 4 * i * per;
        for j in 0..per {
            data.push(f32::from_le_bytes(
                bytes[off + 4 * j..off + 4 * j + 4].try_into().unwrap(),
            ));
        }
        samples.push(LabeledSample {
            image: Array3::from_shape_vec((c, h, w), data).unwrap(),
            identity: parse(toks[1])?,
            gender: parse(toks[2])?,
            age_group: parse(toks[3])?,
            race: parse(toks[4])?,
        });
    }
    if samples.len() != count {
        return Err(malformed("manifest sample count disagrees with pack"));
    }
    Ok((dims, samples))
}
