//! Video-to-memory contrastive loss, batch-hard triplet loss, label-smoothed
//! cross-entropy and their unweighted sum.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor, Var};
use crate::params::{ParamId, ParamStore};

/// Norm guard for cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;
pub const TRIPLET_MARGIN: f64 = 0.3;
pub const LABEL_SMOOTHING: f64 = 0.1;

/// Plain linear identity classifier `D×Y`, no bias.
#[derive(Clone, Debug)]
pub struct ClassifierParams {
    pub weight: ParamId,
    pub classes: usize,
}

impl ClassifierParams {
    pub fn init<T: Real, R: Rng>(store: &mut ParamStore<T>, width: usize, classes: usize, rng: &mut R) -> Self {
        ClassifierParams {
            weight: store.normal("classifier.weight", &[width, classes], 0.001, rng),
            classes,
        }
    }
}

/// Rows scaled to unit length, `‖x‖` guarded by [`COSINE_EPS`].
pub fn l2_normalize<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    let last = s.len() - 1;
    let mut keep = s.clone();
    keep[last] = 1;
    let norm = x
        .mul(x)?
        .sum_axis(last)?
        .add_scalar(COSINE_EPS * COSINE_EPS)
        .sqrt()?
        .reshape(&keep)?;
    x.div(norm)
}

/// Cosine similarity of two vectors; a zero vector gives 0.
pub fn cosine_sim<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    if a.shape() != b.shape() || a.shape().len() != 1 {
        return Err(Error::shape("cosine_sim", &a.shape(), &b.shape()));
    }
    l2_normalize(a)?.mul(l2_normalize(b)?)?.sum_axis(0)
}

/// Pairwise cosine similarities `[n, d] × [m, d] → [n, m]`.
pub fn cosine_matrix<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    l2_normalize(a)?.matmul(l2_normalize(b)?.transpose()?)
}

/// Contrastive loss between sequence features `[B, d]` and updated memory rows
/// `[P, d]`, averaged over the memory identities.
///
/// Each memory row sees a softmax over the cosine similarities to all `B`
/// features; the loss is the mean negative log-probability of its positives.
/// No temperature.
pub fn v2m_loss<'t, T: Real>(
    features: Var<'t, T>,
    memory: Var<'t, T>,
    labels: &[u32],
    memory_ids: &[u32],
) -> Result<Var<'t, T>> {
    let (fs, ms) = (features.shape(), memory.shape());
    if fs.len() != 2 || ms.len() != 2 || fs[1] != ms[1] {
        return Err(Error::shape("v2m_loss", &fs, &ms));
    }
    let (bsz, p) = (fs[0], ms[0]);
    if labels.len() != bsz || memory_ids.len() != p {
        return Err(Error::contract("v2m_loss: label counts do not match feature rows"));
    }
    if let Some(y) = labels.iter().find(|y| !memory_ids.contains(y)) {
        return Err(Error::contract(format!("v2m_loss: label {y} has no memory row")));
    }
    // weights[i, j] = 1/|P(y_i)| for positives j of identity i
    let mut weights = vec![T::zero(); p * bsz];
    for (i, &y) in memory_ids.iter().enumerate() {
        let count = labels.iter().filter(|&&l| l == y).count();
        if count == 0 {
            return Err(Error::contract(format!(
                "v2m_loss: memory identity {y} has no positive in the batch"
            )));
        }
        let w = T::one() / T::of(count as f64);
        for (j, &l) in labels.iter().enumerate() {
            if l == y {
                weights[i * bsz + j] = w;
            }
        }
    }
    let tape = features.tape();
    let w = tape.constant(Tensor::new(vec![p, bsz], weights)?);
    let log_p = cosine_matrix(memory, features)?.log_softmax();
    Ok(log_p.mul(w)?.sum().scale(-1.0 / p as f64))
}

/// Euclidean distance matrix `[B, n] → [B, B]` built from explicit differences.
pub fn pairwise_distances<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::contract(format!("pairwise_distances expects [B, n], got {s:?}")));
    }
    let (b, n) = (s[0], s[1]);
    let a = x.reshape(&[b, 1, n])?;
    let c = x.reshape(&[1, b, n])?;
    let diff = a.sub(c)?;
    diff.mul(diff)?.sum_axis(2)?.clamp_min(1e-12).sqrt()
}

/// Batch-hard triplet loss and the number of anchors skipped for lacking a
/// positive or a negative.
pub fn triplet_loss<'t, T: Real>(features: Var<'t, T>, labels: &[u32], margin: f64) -> Result<(Var<'t, T>, usize)> {
    let s = features.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::contract(format!(
            "triplet_loss: {} labels for features {s:?}",
            labels.len()
        )));
    }
    let b = labels.len();
    let dist = pairwise_distances(features)?;
    let dv = dist.to_tensor();
    let d = dv.data();
    let mut pos_idx = Vec::with_capacity(b);
    let mut neg_idx = Vec::with_capacity(b);
    let mut skipped = 0;
    for a in 0..b {
        let mut hard_pos: Option<usize> = None;
        let mut hard_neg: Option<usize> = None;
        for j in 0..b {
            let dj = d[a * b + j];
            if labels[j] == labels[a] {
                if j != a && hard_pos.is_none_or(|p| dj > d[a * b + p]) {
                    hard_pos = Some(j);
                }
            } else if hard_neg.is_none_or(|n| dj < d[a * b + n]) {
                hard_neg = Some(j);
            }
        }
        match (hard_pos, hard_neg) {
            (Some(p), Some(n)) => {
                pos_idx.push(a * b + p);
                neg_idx.push(a * b + n);
            }
            _ => skipped += 1,
        }
    }
    if pos_idx.is_empty() {
        return Err(Error::contract(
            "triplet_loss: no anchor has both a positive and a negative",
        ));
    }
    if skipped > 0 {
        log::warn!("triplet_loss: skipped {skipped} anchors without positive/negative");
    }
    let flat = dist.reshape(&[b * b])?;
    let dp = flat.gather(&pos_idx)?;
    let dn = flat.gather(&neg_idx)?;
    let hinge = dp.sub(dn)?.add_scalar(margin).relu();
    Ok((hinge.mean(), skipped))
}

/// Cross-entropy against `(1 − eps)·onehot + eps/Y`.
pub fn ce_label_smooth<'t, T: Real>(logits: Var<'t, T>, classes: &[usize], eps: f64) -> Result<Var<'t, T>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != classes.len() {
        return Err(Error::contract(format!(
            "ce_label_smooth: {} labels for logits {s:?}",
            classes.len()
        )));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::contract(format!("label smoothing {eps} outside [0, 1)")));
    }
    let (b, y) = (s[0], s[1]);
    let off = T::of(eps / y as f64);
    let on = T::of(1.0 - eps + eps / y as f64);
    let mut target = vec![off; b * y];
    for (i, &c) in classes.iter().enumerate() {
        if c >= y {
            return Err(Error::contract(format!("class {c} out of range for {y} classes")));
        }
        target[i * y + c] = on;
    }
    let tape = logits.tape();
    let target = tape.constant(Tensor::new(vec![b, y], target)?);
    Ok(logits.log_softmax().mul(target)?.sum().scale(-1.0 / b as f64))
}

/// Loss components of one batch.
pub struct LossBundle<'t, T> {
    pub v2m: Var<'t, T>,
    pub triplet: Var<'t, T>,
    pub ce: Var<'t, T>,
    pub total: Var<'t, T>,
    pub skipped_anchors: usize,
}

/// Scalar values of a [`LossBundle`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub v2m: f64,
    pub triplet: f64,
    pub ce: f64,
    pub total: f64,
}

impl<T: Real> LossBundle<'_, T> {
    pub fn values(&self) -> LossValues {
        LossValues {
            v2m: self.v2m.item().f64(),
            triplet: self.triplet.item().f64(),
            ce: self.ce.item().f64(),
            total: self.total.item().f64(),
        }
    }
}

/// Inputs of the total objective.
pub struct LossInputs<'a, 't, T> {
    /// Encoder sequence features `[B, d]`.
    pub v: Var<'t, T>,
    /// Aggregated features `[B, D]`.
    pub v_hat: Var<'t, T>,
    /// Updated memory rows `[P, d]`.
    pub memory: Var<'t, T>,
    pub memory_ids: &'a [u32],
    pub logits: Var<'t, T>,
    pub labels: &'a [u32],
    pub classes: &'a [usize],
    pub margin: f64,
    pub smoothing: f64,
}

/// `L_total = L_V2M(v, M′) + L_tri(v̂) + L_ce(v̂)`.
pub fn total_loss<'t, T: Real>(inputs: LossInputs<'_, 't, T>) -> Result<LossBundle<'t, T>> {
    let v2m = v2m_loss(inputs.v, inputs.memory, inputs.labels, inputs.memory_ids)?;
    let (triplet, skipped_anchors) = triplet_loss(inputs.v_hat, inputs.labels, inputs.margin)?;
    let ce = ce_label_smooth(inputs.logits, inputs.classes, inputs.smoothing)?;
    let total = v2m.add(triplet)?.add(ce)?;
    Ok(LossBundle {
        v2m,
        triplet,
        ce,
        total,
        skipped_anchors,
    })
}
