//! Classification heads over input feature vectors: a flat cross-entropy
//! head, a hierarchical head over three nested partitions, and a von
//! Mises-Fisher mixture head trained by negative log-likelihood.
//!
//! Heads are linear over the ingested features (the image backbone that
//! produced them is frozen upstream and out of scope). Every loss here
//! carries a hand-derived backward pass; the tests certify each one against
//! finite differences.

use crate::data::{seeded_rng, Dataset};
use crate::geo::{GeoPoint, Vec3};
use crate::hash::to_hex;
use crate::numerics::{
    log_sum_exp, softmax, Checkpoint, CheckpointError, LrSchedule, NamedParam, NumericsError,
    Optimizer, OptimizerKind, Tensor1, Tensor2,
};
use crate::partition::{CellId, Partition, PartitionError};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

/// Concentrations are capped here; the density itself is computed through a
/// stable log-sinh so the cap mostly guards against runaway training.
pub const KAPPA_MAX: f64 = 700.0;
/// Floor on log-concentration so `exp(rho)` never underflows to zero.
pub const RHO_MIN: f64 = -30.0;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("target index {index} out of range for {n} cells")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("vMF concentration must be positive, got {0}")]
    NonPositiveKappa(f64),
    #[error("{count} training points fall in pruned regions (first ids: {preview:?})")]
    UnassignablePoint { count: usize, preview: Vec<u64> },
    #[error("head was trained against partition {expected}, given {found}")]
    PartitionMismatch { expected: String, found: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Cross-entropy loss and gradient at the logit level: `-log softmax[target]`.
fn ce_from_logits(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let loss = lse - logits[target];
    let mut d_logits = softmax(logits);
    d_logits[target] -= 1.0;
    (loss, d_logits)
}

// ---------------------------------------------------------------------------
// Flat head
// ---------------------------------------------------------------------------

/// A single linear layer producing a distribution over partition leaves.
#[derive(Debug, Clone)]
pub struct FlatHead {
    pub w: Tensor2,
    pub b: Tensor1,
    cell_ids: Vec<CellId>,
    partition_hash: [u8; 32],
}

#[derive(Debug, Clone)]
pub struct FlatGrads {
    pub w: Tensor2,
    pub b: Tensor1,
}

impl FlatHead {
    /// Zero bias, uniform `(-1/sqrt(D), 1/sqrt(D))` weights drawn row-major.
    pub fn init(partition: &Partition, dim: usize, rng: &mut ChaCha20Rng) -> Self {
        let n = partition.leaf_count();
        let lim = 1.0 / (dim as f64).sqrt();
        let data: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-lim..lim)).collect();
        Self {
            w: Tensor2::from_vec(n, dim, data).unwrap(),
            b: Tensor1::zeros(n),
            cell_ids: partition.leaves().iter().map(|c| c.id.clone()).collect(),
            partition_hash: partition.content_hash(),
        }
    }

    pub fn n_cells(&self) -> usize {
        self.w.rows()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    pub fn cell_id(&self, index: usize) -> &CellId {
        &self.cell_ids[index]
    }

    pub fn partition_hash(&self) -> &[u8; 32] {
        &self.partition_hash
    }

    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>, ClassifyError> {
        Ok(crate::numerics::linear_vec(&self.w, &self.b, z)?)
    }

    pub fn probabilities(&self, z: &[f64]) -> Result<Vec<f64>, ClassifyError> {
        Ok(softmax(&self.logits(z)?))
    }

    /// Argmax class, ties broken by the lowest index.
    pub fn predict_index(&self, z: &[f64]) -> Result<usize, ClassifyError> {
        Ok(argmax(&self.logits(z)?))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_meta("head_kind", "flat");
        ck.push_meta("partition_hash", &to_hex(&self.partition_hash));
        ck.push_meta("n_cells", &self.n_cells().to_string());
        ck.push_meta("dim", &self.dim().to_string());
        ck.params.push(NamedParam::new(
            "w",
            vec![self.w.rows(), self.w.cols()],
            self.w.data().to_vec(),
        ));
        ck.params
            .push(NamedParam::new("b", vec![self.b.len()], self.b.data().to_vec()));
        ck
    }

    /// Rebinds a checkpoint to its partition, refusing a hash mismatch.
    pub fn from_checkpoint(ck: &Checkpoint, partition: &Partition) -> Result<Self, ClassifyError> {
        check_partition_hash(ck, "partition_hash", partition)?;
        let w = ck.require_param("w")?;
        let b = ck.require_param("b")?;
        let n = partition.leaf_count();
        if w.shape.len() != 2 || w.shape[0] != n || b.shape != vec![n] {
            return Err(ClassifyError::InvalidConfig(format!(
                "checkpoint shapes {:?}/{:?} do not match {n} partition leaves",
                w.shape, b.shape
            )));
        }
        Ok(Self {
            w: Tensor2::from_vec(w.shape[0], w.shape[1], w.data.clone())
                .map_err(ClassifyError::Numerics)?,
            b: Tensor1::from_vec(b.data.clone()),
            cell_ids: partition.leaves().iter().map(|c| c.id.clone()).collect(),
            partition_hash: partition.content_hash(),
        })
    }
}

fn check_partition_hash(
    ck: &Checkpoint,
    key: &str,
    partition: &Partition,
) -> Result<(), ClassifyError> {
    let expected = ck.require_meta(key)?;
    let found = to_hex(&partition.content_hash());
    if expected != found {
        return Err(ClassifyError::PartitionMismatch {
            expected: expected.to_string(),
            found,
        });
    }
    Ok(())
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `-log softmax(Wz + b)[target]` with gradients for the head parameters.
pub fn ce_loss(
    head: &FlatHead,
    z: &[f64],
    target: usize,
) -> Result<(f64, FlatGrads), ClassifyError> {
    if target >= head.n_cells() {
        return Err(ClassifyError::IndexOutOfRange {
            index: target,
            n: head.n_cells(),
        });
    }
    let logits = head.logits(z)?;
    let (loss, d_logits) = ce_from_logits(&logits, target);
    let (d_w, d_b, _) = crate::numerics::linear_vec_backward(&head.w, z, &d_logits);
    Ok((loss, FlatGrads { w: d_w, b: d_b }))
}

/// Mean cross-entropy over a batch, with gradients accumulated in place.
/// Returns the mean loss.
fn ce_batch(
    head: &FlatHead,
    dataset: &Dataset,
    rows: &[usize],
    targets: &[usize],
    d_w: &mut Tensor2,
    d_b: &mut Tensor1,
) -> Result<f64, ClassifyError> {
    let scale = 1.0 / rows.len() as f64;
    let mut total = 0.0;
    for &row in rows {
        let z = dataset.feature_row_f64(row);
        let logits = head.logits(&z)?;
        let (loss, d_logits) = ce_from_logits(&logits, targets[row]);
        total += loss;
        for (i, &g) in d_logits.iter().enumerate() {
            let coef = g * scale;
            d_b.data_mut()[i] += coef;
            for (dw, x) in d_w.row_mut(i).iter_mut().zip(z.iter()) {
                *dw += coef * x;
            }
        }
    }
    Ok(total * scale)
}

// ---------------------------------------------------------------------------
// Hierarchical head
// ---------------------------------------------------------------------------

/// Three flat heads bound to nested coarse/mid/fine snapshots, fused at
/// inference by multiplying each fine cell's probability with its ancestors'.
#[derive(Debug, Clone)]
pub struct HcHead {
    pub coarse: FlatHead,
    pub mid: FlatHead,
    pub fine: FlatHead,
    /// Fine class index -> ancestor class index, total over fine leaves.
    anc_mid: Vec<usize>,
    anc_coarse: Vec<usize>,
}

impl HcHead {
    pub fn new(
        coarse: FlatHead,
        mid: FlatHead,
        fine: FlatHead,
        coarse_p: &Partition,
        mid_p: &Partition,
        fine_p: &Partition,
    ) -> Result<Self, ClassifyError> {
        let mut anc_mid = Vec::with_capacity(fine_p.leaf_count());
        let mut anc_coarse = Vec::with_capacity(fine_p.leaf_count());
        for leaf in fine_p.leaves() {
            anc_mid.push(mid_p.ancestor_index(&leaf.id)?);
            anc_coarse.push(coarse_p.ancestor_index(&leaf.id)?);
        }
        Ok(Self {
            coarse,
            mid,
            fine,
            anc_mid,
            anc_coarse,
        })
    }

    pub fn ancestors_of(&self, fine_index: usize) -> (usize, usize) {
        (self.anc_mid[fine_index], self.anc_coarse[fine_index])
    }

    /// Fine-cell argmax of `log p_fine + log p_mid(anc) + log p_coarse(anc)`;
    /// ties go to the lowest fine index.
    pub fn predict_index(&self, z: &[f64]) -> Result<usize, ClassifyError> {
        let lf = log_softmax(&self.fine.logits(z)?);
        let lm = log_softmax(&self.mid.logits(z)?);
        let lc = log_softmax(&self.coarse.logits(z)?);
        let scores: Vec<f64> = (0..lf.len())
            .map(|i| lf[i] + lm[self.anc_mid[i]] + lc[self.anc_coarse[i]])
            .collect();
        Ok(argmax(&scores))
    }

    pub fn cell_id(&self, fine_index: usize) -> &CellId {
        self.fine.cell_id(fine_index)
    }

    pub fn partition_hash(&self) -> &[u8; 32] {
        self.fine.partition_hash()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_meta("head_kind", "hc");
        ck.push_meta("partition_hash", &to_hex(self.fine.partition_hash()));
        ck.push_meta("partition_hash_mid", &to_hex(self.mid.partition_hash()));
        ck.push_meta(
            "partition_hash_coarse",
            &to_hex(self.coarse.partition_hash()),
        );
        ck.push_meta("dim", &self.fine.dim().to_string());
        for (prefix, head) in [
            ("coarse", &self.coarse),
            ("mid", &self.mid),
            ("fine", &self.fine),
        ] {
            ck.params.push(NamedParam::new(
                &format!("{prefix}_w"),
                vec![head.w.rows(), head.w.cols()],
                head.w.data().to_vec(),
            ));
            ck.params.push(NamedParam::new(
                &format!("{prefix}_b"),
                vec![head.b.len()],
                head.b.data().to_vec(),
            ));
        }
        ck
    }

    pub fn from_checkpoint(
        ck: &Checkpoint,
        coarse_p: &Partition,
        mid_p: &Partition,
        fine_p: &Partition,
    ) -> Result<Self, ClassifyError> {
        check_partition_hash(ck, "partition_hash", fine_p)?;
        check_partition_hash(ck, "partition_hash_mid", mid_p)?;
        check_partition_hash(ck, "partition_hash_coarse", coarse_p)?;
        let load = |prefix: &str, p: &Partition| -> Result<FlatHead, ClassifyError> {
            let w = ck.require_param(&format!("{prefix}_w"))?;
            let b = ck.require_param(&format!("{prefix}_b"))?;
            Ok(FlatHead {
                w: Tensor2::from_vec(w.shape[0], w.shape[1], w.data.clone())
                    .map_err(ClassifyError::Numerics)?,
                b: Tensor1::from_vec(b.data.clone()),
                cell_ids: p.leaves().iter().map(|c| c.id.clone()).collect(),
                partition_hash: p.content_hash(),
            })
        };
        HcHead::new(
            load("coarse", coarse_p)?,
            load("mid", mid_p)?,
            load("fine", fine_p)?,
            coarse_p,
            mid_p,
            fine_p,
        )
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|v| v - lse).collect()
}

/// Average of the three per-partition cross-entropy losses with the fine
/// target and its ancestors.
pub fn hc_loss(
    head: &HcHead,
    z: &[f64],
    fine_target: usize,
) -> Result<(f64, [FlatGrads; 3]), ClassifyError> {
    if fine_target >= head.fine.n_cells() {
        return Err(ClassifyError::IndexOutOfRange {
            index: fine_target,
            n: head.fine.n_cells(),
        });
    }
    let (mid_t, coarse_t) = head.ancestors_of(fine_target);
    let (lc, mut gc) = ce_loss(&head.coarse, z, coarse_t)?;
    let (lm, mut gm) = ce_loss(&head.mid, z, mid_t)?;
    let (lf, mut gf) = ce_loss(&head.fine, z, fine_target)?;
    for g in [&mut gc, &mut gm, &mut gf] {
        g.w.data_mut().iter_mut().for_each(|v| *v /= 3.0);
        g.b.data_mut().iter_mut().for_each(|v| *v /= 3.0);
    }
    Ok(((lc + lm + lf) / 3.0, [gc, gm, gf]))
}

// ---------------------------------------------------------------------------
// MvMF head
// ---------------------------------------------------------------------------

/// Stable `ln sinh(k) = k + ln(1 - e^{-2k}) - ln 2`, valid for any `k > 0`.
fn log_sinh(k: f64) -> f64 {
    k + (-(-2.0 * k).exp_m1()).ln() - std::f64::consts::LN_2
}

/// Stable `coth(k) = (1 + e^{-2k}) / (1 - e^{-2k})`.
fn coth(k: f64) -> f64 {
    let em = (-2.0 * k).exp_m1(); // e^{-2k} - 1
    (2.0 + em) / -em
}

/// Log-density of the von Mises-Fisher distribution on the 2-sphere:
/// `ln kappa - ln(4 pi) - ln sinh(kappa) + kappa * mu . x`.
pub fn vmf_log_density(x: &GeoPoint, mu: Vec3, kappa: f64) -> Result<f64, ClassifyError> {
    if !(kappa > 0.0) {
        return Err(ClassifyError::NonPositiveKappa(kappa));
    }
    let u = x.unit_vector();
    Ok(kappa.ln() - (4.0 * std::f64::consts::PI).ln() - log_sinh(kappa) + kappa * mu.dot(u))
}

/// Mixture of vMF components: a linear head predicts per-input mixture
/// weights; each partition leaf owns one component with mean `mu_i`
/// (initialized to the cell center) and concentration `exp(rho_i)`.
#[derive(Debug, Clone)]
pub struct MvmfHead {
    pub w: Tensor2,
    pub b: Tensor1,
    pub mu: Vec<Vec3>,
    pub rho: Tensor1,
    pub mu_trainable: bool,
    cell_ids: Vec<CellId>,
    partition_hash: [u8; 32],
}

#[derive(Debug, Clone)]
pub struct MvmfGrads {
    pub w: Tensor2,
    pub b: Tensor1,
    pub rho: Tensor1,
    /// Present only when `mu_trainable` is set.
    pub mu: Option<Vec<Vec3>>,
}

impl MvmfHead {
    /// Mixture-weight layer copied from a trained flat head; `mu_i` at the
    /// cell centers, `rho_i = ln kappa0`.
    pub fn from_flat(
        flat: &FlatHead,
        partition: &Partition,
        kappa0: f64,
        mu_trainable: bool,
    ) -> Result<Self, ClassifyError> {
        if !(kappa0 > 0.0 && kappa0 <= KAPPA_MAX) {
            return Err(ClassifyError::InvalidConfig(format!(
                "kappa0 must be in (0, {KAPPA_MAX}], got {kappa0}"
            )));
        }
        let expected = to_hex(&partition.content_hash());
        let found = to_hex(flat.partition_hash());
        if expected != found {
            return Err(ClassifyError::PartitionMismatch { expected, found });
        }
        let mu: Vec<Vec3> = partition
            .leaves()
            .iter()
            .map(|c| c.center.unit_vector())
            .collect();
        Ok(Self {
            w: flat.w.clone(),
            b: flat.b.clone(),
            rho: Tensor1::from_vec(vec![kappa0.ln(); mu.len()]),
            mu,
            mu_trainable,
            cell_ids: flat.cell_ids.clone(),
            partition_hash: flat.partition_hash,
        })
    }

    pub fn n_components(&self) -> usize {
        self.mu.len()
    }

    pub fn kappa(&self, i: usize) -> f64 {
        self.rho.data()[i].exp()
    }

    /// Mixture weights `softmax(Wz + b)`; they sum to one.
    pub fn weights(&self, z: &[f64]) -> Result<Vec<f64>, ClassifyError> {
        Ok(softmax(&crate::numerics::linear_vec(&self.w, &self.b, z)?))
    }

    /// Highest-weight component (ties to the lowest index) and the location
    /// of its mean as the point estimate.
    pub fn predict(&self, z: &[f64]) -> Result<(usize, CellId, GeoPoint), ClassifyError> {
        let weights = self.weights(z)?;
        let i = argmax(&weights);
        let location = GeoPoint::from_unit_vector(self.mu[i])
            .expect("component means stay unit vectors");
        Ok((i, self.cell_ids[i].clone(), location))
    }

    pub fn cell_id(&self, index: usize) -> &CellId {
        &self.cell_ids[index]
    }

    pub fn partition_hash(&self) -> &[u8; 32] {
        &self.partition_hash
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_meta("head_kind", "mvmf");
        ck.push_meta("partition_hash", &to_hex(&self.partition_hash));
        ck.push_meta("n_cells", &self.n_components().to_string());
        ck.push_meta("dim", &self.w.cols().to_string());
        ck.push_meta("mu_trainable", if self.mu_trainable { "1" } else { "0" });
        ck.params.push(NamedParam::new(
            "w",
            vec![self.w.rows(), self.w.cols()],
            self.w.data().to_vec(),
        ));
        ck.params
            .push(NamedParam::new("b", vec![self.b.len()], self.b.data().to_vec()));
        let mu_flat: Vec<f64> = self
            .mu
            .iter()
            .flat_map(|m| [m.x, m.y, m.z])
            .collect();
        ck.params
            .push(NamedParam::new("mu", vec![self.mu.len(), 3], mu_flat));
        ck.params.push(NamedParam::new(
            "rho",
            vec![self.rho.len()],
            self.rho.data().to_vec(),
        ));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, partition: &Partition) -> Result<Self, ClassifyError> {
        check_partition_hash(ck, "partition_hash", partition)?;
        let w = ck.require_param("w")?;
        let b = ck.require_param("b")?;
        let mu = ck.require_param("mu")?;
        let rho = ck.require_param("rho")?;
        let n = partition.leaf_count();
        if w.shape[0] != n || mu.shape != vec![n, 3] || rho.shape != vec![n] {
            return Err(ClassifyError::InvalidConfig(
                "mvmf checkpoint shapes do not match the partition".into(),
            ));
        }
        Ok(Self {
            w: Tensor2::from_vec(w.shape[0], w.shape[1], w.data.clone())
                .map_err(ClassifyError::Numerics)?,
            b: Tensor1::from_vec(b.data.clone()),
            mu: mu
                .data
                .chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect(),
            rho: Tensor1::from_vec(rho.data.clone()),
            mu_trainable: ck.meta_value("mu_trainable") == Some("1"),
            cell_ids: partition.leaves().iter().map(|c| c.id.clone()).collect(),
            partition_hash: partition.content_hash(),
        })
    }
}

/// Per-component constants that depend only on the concentrations; reused
/// across a batch because parameters change only at optimizer steps.
struct VmfConsts {
    kappa: Vec<f64>,
    log_c: Vec<f64>,
    kappa_coth: Vec<f64>,
}

impl VmfConsts {
    fn of(head: &MvmfHead) -> Result<Self, ClassifyError> {
        let mut kappa = Vec::with_capacity(head.n_components());
        let mut log_c = Vec::with_capacity(head.n_components());
        let mut kappa_coth = Vec::with_capacity(head.n_components());
        for &r in head.rho.data() {
            let k = r.exp();
            if !(k > 0.0) {
                return Err(ClassifyError::NonPositiveKappa(k));
            }
            kappa.push(k);
            log_c.push(k.ln() - (4.0 * std::f64::consts::PI).ln() - log_sinh(k));
            kappa_coth.push(k * coth(k));
        }
        Ok(Self {
            kappa,
            log_c,
            kappa_coth,
        })
    }
}

/// Negative log-likelihood of the mixture at the image location, with
/// analytic gradients for `W`, `b`, `rho` (and `mu` when trainable).
///
/// With `a_i = log w_i + log vMF_i(x)` the loss is `-logsumexp(a)`; the
/// posterior `s = softmax(a)` drives every gradient:
/// `d logits = softmax(logits) - s`, `d rho_i = -s_i (1 - k coth k + k mu.u)`,
/// `d mu_i = -s_i k u`.
pub fn mvmf_nll(
    head: &MvmfHead,
    z: &[f64],
    location: &GeoPoint,
) -> Result<(f64, MvmfGrads), ClassifyError> {
    let consts = VmfConsts::of(head)?;
    mvmf_nll_with(head, &consts, z, location)
}

fn mvmf_nll_with(
    head: &MvmfHead,
    consts: &VmfConsts,
    z: &[f64],
    location: &GeoPoint,
) -> Result<(f64, MvmfGrads), ClassifyError> {
    let n = head.n_components();
    let logits = crate::numerics::linear_vec(&head.w, &head.b, z)?;
    let log_w = log_softmax(&logits);
    let u = location.unit_vector();

    let mut scores = Vec::with_capacity(n);
    let mut cosines = Vec::with_capacity(n);
    for i in 0..n {
        let cos = head.mu[i].dot(u);
        cosines.push(cos);
        scores.push(log_w[i] + consts.log_c[i] + consts.kappa[i] * cos);
    }
    let loss = -log_sum_exp(&scores);
    if !loss.is_finite() {
        return Err(ClassifyError::Numerics(NumericsError::NonFinite("mvmf_nll")));
    }

    let posterior = softmax(&scores);
    let prior = softmax(&logits);
    let d_logits: Vec<f64> = prior
        .iter()
        .zip(posterior.iter())
        .map(|(p, s)| p - s)
        .collect();
    let (d_w, d_b, _) = crate::numerics::linear_vec_backward(&head.w, z, &d_logits);

    let d_rho: Vec<f64> = (0..n)
        .map(|i| -posterior[i] * (1.0 - consts.kappa_coth[i] + consts.kappa[i] * cosines[i]))
        .collect();
    let d_mu = head.mu_trainable.then(|| {
        (0..n)
            .map(|i| u.scale(-posterior[i] * consts.kappa[i]))
            .collect()
    });

    Ok((
        loss,
        MvmfGrads {
            w: d_w,
            b: d_b,
            rho: Tensor1::from_vec(d_rho),
            mu: d_mu,
        },
    ))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleSpec {
    Constant,
    StepDecay { factor: f64, every_epochs: usize },
    /// Cosine annealing over the configured epoch count.
    Cosine,
}

impl ScheduleSpec {
    fn materialize(self, epochs: usize) -> LrSchedule {
        match self {
            ScheduleSpec::Constant => LrSchedule::Constant,
            ScheduleSpec::StepDecay {
                factor,
                every_epochs,
            } => LrSchedule::StepDecay {
                factor,
                every_epochs,
            },
            ScheduleSpec::Cosine => LrSchedule::CosineAnnealing {
                total_epochs: epochs.max(1),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleSpec,
    pub seed: u64,
    /// Initial concentration for MvMF components.
    pub kappa0: f64,
    /// Train component means with projected gradient (renormalized after
    /// every step). Off by default: means stay at the cell centers.
    pub train_mu: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 64,
            optimizer: OptimizerKind::adamw(),
            base_lr: 3e-3,
            weight_decay: 1e-4,
            schedule: ScheduleSpec::Cosine,
            seed: 0,
            kappa0: 10.0,
            train_mu: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ClassifyError> {
        if self.batch_size == 0 {
            return Err(ClassifyError::InvalidConfig("batch_size must be > 0".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(ClassifyError::InvalidConfig("base_lr must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-point fine cell targets; fails listing the offending ids when any
/// point falls in a pruned region.
pub fn cell_targets(dataset: &Dataset, partition: &Partition) -> Result<Vec<usize>, ClassifyError> {
    let mut targets = Vec::with_capacity(dataset.len());
    let mut missing = Vec::new();
    for i in 0..dataset.len() {
        match partition.assign_index(&dataset.locations[i]) {
            Some(idx) => targets.push(idx),
            None => missing.push(dataset.ids[i]),
        }
    }
    if !missing.is_empty() {
        return Err(ClassifyError::UnassignablePoint {
            count: missing.len(),
            preview: missing.into_iter().take(8).collect(),
        });
    }
    Ok(targets)
}

fn epoch_batches(
    n: usize,
    batch_size: usize,
    rng: &mut ChaCha20Rng,
) -> impl Iterator<Item = Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let batch = batch_size.max(1);
    (0..n.div_ceil(batch)).map(move |b| order[b * batch..((b + 1) * batch).min(n)].to_vec())
}

/// Trains a flat head; returns the head and its per-epoch mean loss curve.
pub fn train_flat(
    dataset: &Dataset,
    partition: &Partition,
    config: &TrainConfig,
) -> Result<(FlatHead, Vec<f64>), ClassifyError> {
    config.validate()?;
    let targets = cell_targets(dataset, partition)?;
    let mut rng = seeded_rng(config.seed);
    let mut head = FlatHead::init(partition, dataset.dim(), &mut rng);
    let mut curve = Vec::with_capacity(config.epochs);
    let mut opt = Optimizer::new(
        config.optimizer,
        config.base_lr,
        config.weight_decay,
        config.schedule.materialize(config.epochs),
    );
    for epoch in 0..config.epochs {
        opt.set_epoch(epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0f64;
        for batch in epoch_batches(dataset.len(), config.batch_size, &mut rng) {
            let mut d_w = Tensor2::zeros(head.w.rows(), head.w.cols());
            let mut d_b = Tensor1::zeros(head.b.len());
            epoch_loss += ce_batch(&head, dataset, &batch, &targets, &mut d_w, &mut d_b)?;
            batches += 1.0;
            opt.step(
                &mut [head.w.data_mut(), head.b.data_mut()],
                &[d_w.data(), d_b.data()],
            )?;
        }
        curve.push(epoch_loss / batches.max(1.0));
    }
    Ok((head, curve))
}

/// Trains the three hierarchical heads jointly on the averaged loss.
pub fn train_hc(
    dataset: &Dataset,
    coarse_p: &Partition,
    mid_p: &Partition,
    fine_p: &Partition,
    config: &TrainConfig,
) -> Result<(HcHead, Vec<f64>), ClassifyError> {
    config.validate()?;
    let fine_targets = cell_targets(dataset, fine_p)?;
    let mut rng = seeded_rng(config.seed);
    let coarse = FlatHead::init(coarse_p, dataset.dim(), &mut rng);
    let mid = FlatHead::init(mid_p, dataset.dim(), &mut rng);
    let fine = FlatHead::init(fine_p, dataset.dim(), &mut rng);
    let mut head = HcHead::new(coarse, mid, fine, coarse_p, mid_p, fine_p)?;
    let mid_targets: Vec<usize> = fine_targets.iter().map(|&t| head.anc_mid[t]).collect();
    let coarse_targets: Vec<usize> = fine_targets.iter().map(|&t| head.anc_coarse[t]).collect();

    let mut curve = Vec::with_capacity(config.epochs);
    let mut opt = Optimizer::new(
        config.optimizer,
        config.base_lr,
        config.weight_decay,
        config.schedule.materialize(config.epochs),
    );
    for epoch in 0..config.epochs {
        opt.set_epoch(epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0f64;
        for batch in epoch_batches(dataset.len(), config.batch_size, &mut rng) {
            let mut grads: Vec<(Tensor2, Tensor1)> = [&head.coarse, &head.mid, &head.fine]
                .iter()
                .map(|h| (Tensor2::zeros(h.w.rows(), h.w.cols()), Tensor1::zeros(h.b.len())))
                .collect();
            let thirds = [
                (&head.coarse, &coarse_targets),
                (&head.mid, &mid_targets),
                (&head.fine, &fine_targets),
            ];
            let mut batch_loss = 0.0;
            for ((h, t), g) in thirds.iter().zip(grads.iter_mut()) {
                batch_loss += ce_batch(h, dataset, &batch, t, &mut g.0, &mut g.1)?;
            }
            epoch_loss += batch_loss / 3.0;
            batches += 1.0;
            // The 1/3 factor of the averaged loss.
            for (gw, gb) in grads.iter_mut() {
                gw.data_mut().iter_mut().for_each(|v| *v /= 3.0);
                gb.data_mut().iter_mut().for_each(|v| *v /= 3.0);
            }
            opt.step(
                &mut [
                    head.coarse.w.data_mut(),
                    head.coarse.b.data_mut(),
                    head.mid.w.data_mut(),
                    head.mid.b.data_mut(),
                    head.fine.w.data_mut(),
                    head.fine.b.data_mut(),
                ],
                &[
                    grads[0].0.data(),
                    grads[0].1.data(),
                    grads[1].0.data(),
                    grads[1].1.data(),
                    grads[2].0.data(),
                    grads[2].1.data(),
                ],
            )?;
        }
        curve.push(epoch_loss / batches.max(1.0));
    }
    Ok((head, curve))
}

/// Trains an MvMF head initialized from a trained flat head.
pub fn train_mvmf(
    dataset: &Dataset,
    partition: &Partition,
    flat_init: &FlatHead,
    config: &TrainConfig,
) -> Result<(MvmfHead, Vec<f64>), ClassifyError> {
    config.validate()?;
    cell_targets(dataset, partition)?; // every point must be assignable
    let mut head = MvmfHead::from_flat(flat_init, partition, config.kappa0, config.train_mu)?;
    let mut rng = seeded_rng(config.seed);
    let mut curve = Vec::with_capacity(config.epochs);
    let mut opt = Optimizer::new(
        config.optimizer,
        config.base_lr,
        config.weight_decay,
        config.schedule.materialize(config.epochs),
    );
    let rho_max = KAPPA_MAX.ln();
    for epoch in 0..config.epochs {
        opt.set_epoch(epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0f64;
        for batch in epoch_batches(dataset.len(), config.batch_size, &mut rng) {
            let consts = VmfConsts::of(&head)?;
            let scale = 1.0 / batch.len() as f64;
            let mut d_w = Tensor2::zeros(head.w.rows(), head.w.cols());
            let mut d_b = Tensor1::zeros(head.b.len());
            let mut d_rho = Tensor1::zeros(head.rho.len());
            let mut d_mu = vec![Vec3::new(0.0, 0.0, 0.0); head.n_components()];
            let mut batch_loss = 0.0;
            for &row in &batch {
                let z = dataset.feature_row_f64(row);
                let (loss, grads) =
                    mvmf_nll_with(&head, &consts, &z, &dataset.locations[row])?;
                batch_loss += loss;
                for (acc, g) in d_w.data_mut().iter_mut().zip(grads.w.data()) {
                    *acc += g * scale;
                }
                for (acc, g) in d_b.data_mut().iter_mut().zip(grads.b.data()) {
                    *acc += g * scale;
                }
                for (acc, g) in d_rho.data_mut().iter_mut().zip(grads.rho.data()) {
                    *acc += g * scale;
                }
                if let Some(gm) = grads.mu {
                    for (acc, g) in d_mu.iter_mut().zip(gm) {
                        *acc = acc.add(g.scale(scale));
                    }
                }
            }
            epoch_loss += batch_loss * scale;
            batches += 1.0;
            if config.train_mu {
                let mut mu_flat: Vec<f64> =
                    head.mu.iter().flat_map(|m| [m.x, m.y, m.z]).collect();
                let d_mu_flat: Vec<f64> = d_mu.iter().flat_map(|m| [m.x, m.y, m.z]).collect();
                opt.step(
                    &mut [
                        head.w.data_mut(),
                        head.b.data_mut(),
                        head.rho.data_mut(),
                        &mut mu_flat,
                    ],
                    &[d_w.data(), d_b.data(), d_rho.data(), &d_mu_flat],
                )?;
                // Projected step: means live on the sphere.
                for (m, c) in head.mu.iter_mut().zip(mu_flat.chunks_exact(3)) {
                    *m = Vec3::new(c[0], c[1], c[2])
                        .normalized()
                        .unwrap_or(*m);
                }
            } else {
                opt.step(
                    &mut [head.w.data_mut(), head.b.data_mut(), head.rho.data_mut()],
                    &[d_w.data(), d_b.data(), d_rho.data()],
                )?;
            }
            for r in head.rho.data_mut() {
                *r = r.clamp(RHO_MIN, rho_max);
            }
        }
        curve.push(epoch_loss / batches.max(1.0));
    }
    Ok((head, curve))
}

// ---------------------------------------------------------------------------
// Uniform classifier interface for the search stage
// ---------------------------------------------------------------------------

/// Any trained classification head, as used by index building and
/// search-within-cell.
#[derive(Debug, Clone)]
pub enum AnyHead {
    Flat(FlatHead),
    Hc(HcHead),
    Mvmf(MvmfHead),
}

impl AnyHead {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyHead::Flat(_) => "flat",
            AnyHead::Hc(_) => "hc",
            AnyHead::Mvmf(_) => "mvmf",
        }
    }

    /// Class index within the (fine) partition.
    pub fn predict_index(&self, z: &[f64]) -> Result<usize, ClassifyError> {
        match self {
            AnyHead::Flat(h) => h.predict_index(z),
            AnyHead::Hc(h) => h.predict_index(z),
            AnyHead::Mvmf(h) => Ok(h.predict(z)?.0),
        }
    }

    pub fn cell_id(&self, index: usize) -> &CellId {
        match self {
            AnyHead::Flat(h) => h.cell_id(index),
            AnyHead::Hc(h) => h.cell_id(index),
            AnyHead::Mvmf(h) => h.cell_id(index),
        }
    }

    /// Hash of the (fine) partition the head predicts into.
    pub fn partition_hash(&self) -> &[u8; 32] {
        match self {
            AnyHead::Flat(h) => h.partition_hash(),
            AnyHead::Hc(h) => h.partition_hash(),
            AnyHead::Mvmf(h) => h.partition_hash(),
        }
    }

    /// The head's own point prediction: the predicted cell's center, or the
    /// highest-weight component mean for the mixture head.
    pub fn center_prediction(
        &self,
        z: &[f64],
        partition: &Partition,
    ) -> Result<(usize, GeoPoint), ClassifyError> {
        match self {
            AnyHead::Mvmf(h) => {
                let (i, _, loc) = h.predict(z)?;
                Ok((i, loc))
            }
            _ => {
                let i = self.predict_index(z)?;
                Ok((i, partition.leaves()[i].center))
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            AnyHead::Flat(h) => h.to_checkpoint(),
            AnyHead::Hc(h) => h.to_checkpoint(),
            AnyHead::Mvmf(h) => h.to_checkpoint(),
        }
    }
}
