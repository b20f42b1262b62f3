//! Multi-attention metric constraints.
//!
//! A batch of N class-distinct image pairs forwarded through P branches
//! yields 2NP features. Relative to one anchor feature, every other feature
//! falls in exactly one of four groups (same/different attention branch x
//! same/different class). Three constraint families pull the anchor toward
//! positives and push it past negatives via an N-pair soft hinge; the
//! closed-form count of (positive, negative) pairs per anchor is verified
//! against brute-force enumeration.

use serde::Serialize;
use std::collections::HashSet;
use thiserror::Error;

use crate::tensor::{concat, Tensor, TensorError};

pub type Result<T> = std::result::Result<T, MamcError>;

#[derive(Debug, Error)]
pub enum MamcError {
    #[error("feature index out of range: image {image}, branch {branch}")]
    IndexOutOfRange { image: usize, branch: usize },
    #[error("no active constraints in this batch")]
    NoActiveConstraints,
    #[error("invalid batch: {0}")]
    BadBatch(String),
    #[error("lambda must be finite and non-negative, got {0}")]
    BadLambda(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Position of one feature: image index within the batch, branch index.
/// Image `2i` and `2i+1` are the two members of pair `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureRef {
    pub image: usize,
    pub branch: usize,
}

/// The 2NP branch features of a pair batch, plus per-image labels.
pub struct BatchFeatures {
    features: Vec<Vec<Tensor>>,
    labels: Vec<usize>,
    dim: usize,
}

impl BatchFeatures {
    /// `features[image][branch]` must be rectangular with rank-1 tensors of
    /// one common length; images come in adjacent same-class pairs and no
    /// class repeats across pairs.
    pub fn new(features: Vec<Vec<Tensor>>, labels: Vec<usize>) -> Result<BatchFeatures> {
        let bad = |msg: String| Err(MamcError::BadBatch(msg));
        let images = features.len();
        if images < 2 || images % 2 != 0 {
            return bad(format!("need an even number of images >= 2, got {}", images));
        }
        if labels.len() != images {
            return bad(format!("{} labels for {} images", labels.len(), images));
        }
        let branches = features[0].len();
        if branches == 0 {
            return bad("need at least one branch".into());
        }
        let dim = match features[0][0].shape() {
            [d] if *d > 0 => *d,
            other => return bad(format!("features must be vectors, got shape {:?}", other)),
        };
        for (i, row) in features.iter().enumerate() {
            if row.len() != branches {
                return bad(format!("image {} has {} branches, image 0 has {}", i, row.len(), branches));
            }
            for (s, f) in row.iter().enumerate() {
                if f.shape() != [dim] {
                    return bad(format!(
                        "feature ({}, {}) has shape {:?}, expected [{}]",
                        i, s, f.shape(), dim
                    ));
                }
            }
        }
        let mut seen = HashSet::new();
        for pair in 0..images / 2 {
            if labels[2 * pair] != labels[2 * pair + 1] {
                return bad(format!(
                    "pair {} mixes classes {} and {}",
                    pair,
                    labels[2 * pair],
                    labels[2 * pair + 1]
                ));
            }
            if !seen.insert(labels[2 * pair]) {
                return bad(format!("class {} appears in more than one pair", labels[2 * pair]));
            }
        }
        Ok(BatchFeatures { features, labels, dim })
    }

    /// Pair count N.
    pub fn pairs(&self) -> usize {
        self.labels.len() / 2
    }

    /// Branch count P.
    pub fn branches(&self) -> usize {
        self.features[0].len()
    }

    pub fn image_count(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn feature(&self, r: FeatureRef) -> Result<&Tensor> {
        if r.image >= self.image_count() || r.branch >= self.branches() {
            return Err(MamcError::IndexOutOfRange { image: r.image, branch: r.branch });
        }
        Ok(&self.features[r.image][r.branch])
    }

    /// Group every non-anchor feature by (same branch?, same class?).
    pub fn partition(&self, anchor: FeatureRef) -> Result<AnchorGroups> {
        partition(&self.labels, self.branches(), anchor)
    }
}

/// The four anchor-relative groups. Names abbreviate same/different
/// attention (branch) and same/different class: sa/da x sc/dc.
#[derive(Debug, Clone)]
pub struct AnchorGroups {
    pub anchor: FeatureRef,
    /// Same branch, same class: the anchor's pair partner.
    pub sasc: Vec<FeatureRef>,
    /// Same branch, different class.
    pub sadc: Vec<FeatureRef>,
    /// Different branch, same class.
    pub dasc: Vec<FeatureRef>,
    /// Different branch, different class.
    pub dadc: Vec<FeatureRef>,
}

/// Partition on labels alone; `labels[image]` gives each image's class.
/// Iterates image-major, branch-minor, so group contents are ordered.
pub fn partition(labels: &[usize], branches: usize, anchor: FeatureRef) -> Result<AnchorGroups> {
    if anchor.image >= labels.len() || anchor.branch >= branches {
        return Err(MamcError::IndexOutOfRange { image: anchor.image, branch: anchor.branch });
    }
    let mut groups = AnchorGroups {
        anchor,
        sasc: Vec::new(),
        sadc: Vec::new(),
        dasc: Vec::new(),
        dadc: Vec::new(),
    };
    for image in 0..labels.len() {
        for branch in 0..branches {
            let r = FeatureRef { image, branch };
            if r == anchor {
                continue;
            }
            let same_class = labels[image] == labels[anchor.image];
            let same_branch = branch == anchor.branch;
            match (same_branch, same_class) {
                (true, true) => groups.sasc.push(r),
                (true, false) => groups.sadc.push(r),
                (false, true) => groups.dasc.push(r),
                (false, false) => groups.dadc.push(r),
            }
        }
    }
    Ok(groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyKind {
    /// Positives: pair partner on the anchor's branch. Negatives: all
    /// other features.
    Sasc,
    /// Positives: same branch, other classes. Negatives: different branch,
    /// other classes.
    Sadc,
    /// Positives: same class on other branches. Negatives: different
    /// branch, other classes.
    Dasc,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 3] = [FamilyKind::Sasc, FamilyKind::Sadc, FamilyKind::Dasc];

    pub fn as_str(self) -> &'static str {
        match self {
            FamilyKind::Sasc => "sasc",
            FamilyKind::Sadc => "sadc",
            FamilyKind::Dasc => "dasc",
        }
    }
}

/// One family's positives and negatives for a single anchor.
#[derive(Debug, Clone)]
pub struct ConstraintFamily {
    pub kind: FamilyKind,
    pub positives: Vec<FeatureRef>,
    pub negatives: Vec<FeatureRef>,
}

impl ConstraintFamily {
    /// A family contributes only when it has both positives and negatives;
    /// degenerate batches (N=1 or P=1) leave some families empty.
    pub fn is_active(&self) -> bool {
        !self.positives.is_empty() && !self.negatives.is_empty()
    }

    /// Number of (positive, negative) pairs this family contributes.
    pub fn constraint_count(&self) -> u64 {
        self.positives.len() as u64 * self.negatives.len() as u64
    }
}

/// Build the three families from one anchor's groups, in `FamilyKind::ALL`
/// order.
pub fn build_families(groups: &AnchorGroups) -> [ConstraintFamily; 3] {
    let mut sasc_negatives = Vec::new();
    sasc_negatives.extend_from_slice(&groups.sadc);
    sasc_negatives.extend_from_slice(&groups.dasc);
    sasc_negatives.extend_from_slice(&groups.dadc);
    [
        ConstraintFamily {
            kind: FamilyKind::Sasc,
            positives: groups.sasc.clone(),
            negatives: sasc_negatives,
        },
        ConstraintFamily {
            kind: FamilyKind::Sadc,
            positives: groups.sadc.clone(),
            negatives: groups.dadc.clone(),
        },
        ConstraintFamily {
            kind: FamilyKind::Dasc,
            positives: groups.dasc.clone(),
            negatives: groups.dadc.clone(),
        },
    ]
}

/// Reference hinge form of one constraint, computed on raw values:
/// max(0, ||a-p||^2 - ||a-n||^2 + margin). Kept as a test oracle; training
/// uses the smooth `npair` form below.
pub fn hinge_triplet(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> f64 {
    let sq = |x: &[f64], y: &[f64]| -> f64 {
        x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    (sq(anchor, positive) - sq(anchor, negative) + margin).max(0.0)
}

/// Soft N-pair term for one (anchor, positive) and its negatives:
/// log(1 + sum over negatives of exp(a.neg - a.pos)).
pub fn npair_term(anchor: &Tensor, positive: &Tensor, negatives: &[Tensor]) -> Result<Tensor> {
    if negatives.is_empty() {
        return Err(MamcError::NoActiveConstraints);
    }
    let ap = anchor.inner_product(positive)?;
    let mut diffs = Vec::with_capacity(negatives.len());
    for neg in negatives {
        diffs.push(anchor.inner_product(neg)?.sub(&ap)?);
    }
    Ok(concat(&diffs)?.log1p_sum_exp()?)
}

/// One family's N-pair loss over every anchor in the batch, averaged by
/// pair count: (1/N) sum over anchors, positives of `npair_term`. Anchors
/// whose family is inactive are skipped; if all are, this is
/// `NoActiveConstraints` and the caller drops the term.
pub fn npair_loss(batch: &BatchFeatures, kind: FamilyKind) -> Result<Tensor> {
    let mut sum: Option<Tensor> = None;
    for image in 0..batch.image_count() {
        for branch in 0..batch.branches() {
            let anchor = FeatureRef { image, branch };
            let groups = batch.partition(anchor)?;
            let family = &build_families(&groups)[kind as usize];
            debug_assert_eq!(family.kind, kind);
            if !family.is_active() {
                continue;
            }
            let a = batch.feature(anchor)?;
            let negatives: Vec<Tensor> = family
                .negatives
                .iter()
                .map(|&r| batch.feature(r).map(Tensor::clone))
                .collect::<Result<_>>()?;
            for &pos in &family.positives {
                let term = npair_term(a, batch.feature(pos)?, &negatives)?;
                sum = Some(match sum {
                    Some(s) => s.add(&term)?,
                    None => term,
                });
            }
        }
    }
    match sum {
        Some(s) => Ok(s.scalar_mul(1.0 / batch.pairs() as f64)?),
        None => Err(MamcError::NoActiveConstraints),
    }
}

/// Combined objective and its pieces. `total` stays in the graph; the
/// per-part values are plain numbers for logging.
pub struct LossParts {
    pub total: Tensor,
    pub softmax: f64,
    pub sasc: f64,
    pub sadc: f64,
    pub dasc: f64,
}

/// total = mean cross-entropy + lambda * (sasc + sadc + dasc).
///
/// With lambda = 0 the returned tensor IS the softmax mean; no constraint
/// machinery runs, so a lambda-0 run is bit-identical to a plain softmax
/// model. Inactive families contribute zero.
pub fn mamc_loss(batch: &BatchFeatures, logits: &[Tensor], lambda: f64) -> Result<LossParts> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(MamcError::BadLambda(lambda));
    }
    if logits.len() != batch.image_count() {
        return Err(MamcError::BadBatch(format!(
            "{} logit vectors for {} images",
            logits.len(),
            batch.image_count()
        )));
    }
    let mut sm: Option<Tensor> = None;
    for (lg, &label) in logits.iter().zip(batch.labels()) {
        let ce = lg.softmax_cross_entropy(label)?;
        sm = Some(match sm {
            Some(s) => s.add(&ce)?,
            None => ce,
        });
    }
    let softmax = sm.unwrap().scalar_mul(1.0 / logits.len() as f64)?;
    let softmax_val = softmax.item();
    if lambda == 0.0 {
        return Ok(LossParts { total: softmax, softmax: softmax_val, sasc: 0.0, sadc: 0.0, dasc: 0.0 });
    }

    let mut parts = [0.0; 3];
    let mut metric: Option<Tensor> = None;
    for kind in FamilyKind::ALL {
        match npair_loss(batch, kind) {
            Ok(t) => {
                parts[kind as usize] = t.item();
                metric = Some(match metric {
                    Some(m) => m.add(&t)?,
                    None => t,
                });
            }
            Err(MamcError::NoActiveConstraints) => {}
            Err(e) => return Err(e),
        }
    }
    let total = match metric {
        Some(m) => softmax.add(&m.scalar_mul(lambda)?)?,
        None => softmax,
    };
    Ok(LossParts {
        total,
        softmax: softmax_val,
        sasc: parts[0],
        sadc: parts[1],
        dasc: parts[2],
    })
}

/// Per-anchor constraint count in closed form:
/// 2(PN-1) + 4(N-1)^2(P-1) + 4(N-1)(P-1)^2.
pub fn count_constraints(pairs: usize, branches: usize) -> u64 {
    assert!(pairs >= 1 && branches >= 1, "need at least one pair and one branch");
    let n = pairs as u64;
    let p = branches as u64;
    2 * (p * n - 1) + 4 * (n - 1) * (n - 1) * (p - 1) + 4 * (n - 1) * (p - 1) * (p - 1)
}

/// Per-anchor count by brute force: partition a synthetic label layout,
/// build the families, and count (positive, negative) pairs directly.
pub fn enumerate_constraints(pairs: usize, branches: usize) -> u64 {
    assert!(pairs >= 1 && branches >= 1, "need at least one pair and one branch");
    let labels: Vec<usize> = (0..pairs).flat_map(|c| [c, c]).collect();
    let groups = partition(&labels, branches, FeatureRef { image: 0, branch: 0 }).unwrap();
    build_families(&groups).iter().map(ConstraintFamily::constraint_count).sum()
}

/// Closed form, enumeration, and the multiplier over a plain N-pair loss
/// (which gives each anchor N-1 constraints).
#[derive(Debug, Clone, Serialize)]
pub struct CountReport {
    pub closed_form: u64,
    pub enumerated: u64,
    pub npair_baseline: u64,
    /// closed_form / npair_baseline; absent when the baseline is zero.
    pub ratio: Option<f64>,
}

pub fn count_report(pairs: usize, branches: usize) -> CountReport {
    let closed_form = count_constraints(pairs, branches);
    let enumerated = enumerate_constraints(pairs, branches);
    let npair_baseline = pairs as u64 - 1;
    let ratio =
        (npair_baseline > 0).then(|| closed_form as f64 / npair_baseline as f64);
    CountReport { closed_form, enumerated, npair_baseline, ratio }
}
