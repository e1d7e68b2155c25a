//! Assembled objectives and their exact gradients with respect to student
//! logits: the decoupled KD baseline, the per-peer curriculum distillation
//! loss averaged over the other peers, and the joint objective.
//!
//! Teacher quantities are constants: the gradient returned for peer `k`
//! only contains the terms where `k` acts as the student.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::DistillConfig;
use super::nontarget::curriculum_mask;
use super::probs::{
    decouple_target, decouple_target_log, log_softmax, nontarget_distribution,
    nontarget_log_distribution, softmax, MaskVector, TargetSplit,
};
use super::target::{difficulty_weight, phase_gate, truncation_flags, Phase};
use crate::error::{Error, Result};

/// Curriculum decisions for one iteration, shared by every peer.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumDraw {
    pub t: f64,
    pub draw: f64,
    pub phase: Phase,
    /// One mask per sample in the batch.
    pub masks: Vec<MaskVector>,
}

impl CurriculumDraw {
    /// Samples the phase once and one mask per label.
    pub fn sample<R: Rng + ?Sized>(
        t: f64,
        cfg: &DistillConfig,
        labels: &[usize],
        frequencies: &[f64],
        rng: &mut R,
    ) -> Self {
        let draw: f64 = rng.random();
        let phase = if cfg.ablation.no_ctc {
            Phase::Simple
        } else {
            phase_gate(t, cfg.tau0, cfg.tau1, draw)
        };
        let n = frequencies.len();
        let masks = labels
            .iter()
            .map(|&y| {
                if cfg.ablation.no_cnc {
                    MaskVector::target_only(n, y)
                } else {
                    curriculum_mask(t, cfg.tau1, y, frequencies, cfg.mask_smoothing, rng)
                }
            })
            .collect();
        Self {
            t,
            draw,
            phase,
            masks,
        }
    }

    /// Fixed phase with conventional (target-only) masks.
    pub fn conventional(phase: Phase, labels: &[usize], n_classes: usize) -> Self {
        Self {
            t: 0.0,
            draw: 0.0,
            phase,
            masks: labels
                .iter()
                .map(|&y| MaskVector::target_only(n_classes, y))
                .collect(),
        }
    }

    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.phase.hash(&mut h);
        self.t.to_bits().hash(&mut h);
        self.masks.hash(&mut h);
        h.finish()
    }
}

/// Value and student-logit gradient of one loss.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_pair(z_student: &[f64], z_teacher: &[f64], target: usize) -> Result<()> {
    if z_student.len() != z_teacher.len() {
        return Err(Error::Shape(format!(
            "student has {} logits, teacher {}",
            z_student.len(),
            z_teacher.len()
        )));
    }
    if z_student.len() < 2 {
        return Err(Error::Shape("need at least two classes".into()));
    }
    if target >= z_student.len() {
        return Err(Error::Index {
            index: target,
            len: z_student.len(),
        });
    }
    Ok(())
}

/// Accumulates `-w * log p_target` into `grad`.
fn add_target_nll(p: &[f64], log_p_target: f64, target: usize, w: f64, grad: &mut [f64]) -> f64 {
    if w == 0.0 {
        return 0.0;
    }
    for (i, g) in grad.iter_mut().enumerate() {
        let indicator = if i == target { 1.0 } else { 0.0 };
        *g -= w * (indicator - p[i]);
    }
    -w * log_p_target
}

/// Accumulates `-w * log p_rest` into `grad`.
fn add_rest_nll(z: &[f64], p: &[f64], log_p_rest: f64, target: usize, w: f64, grad: &mut [f64]) -> f64 {
    if w == 0.0 {
        return 0.0;
    }
    // Softmax over the non-target entries.
    let rest = nontarget_distribution(z, target, &MaskVector::target_only(z.len(), target))
        .expect("validated by caller");
    for (i, g) in grad.iter_mut().enumerate() {
        *g -= w * (rest[i] - p[i]);
    }
    -w * log_p_rest
}

/// Accumulates `-w * sum_kept q~ log q` into `grad`.
fn add_nontarget_ce(
    z_student: &[f64],
    q_teacher: &[f64],
    target: usize,
    mask: &MaskVector,
    w: f64,
    grad: &mut [f64],
) -> Result<f64> {
    if w == 0.0 {
        return Ok(0.0);
    }
    let log_q = nontarget_log_distribution(z_student, target, mask)?;
    let mut value = 0.0;
    for i in mask.kept() {
        let q = log_q[i].exp();
        value -= q_teacher[i] * log_q[i];
        grad[i] += w * (q - q_teacher[i]);
    }
    Ok(w * value)
}

/// Decoupled KD loss with the teacher held constant:
/// `-p~_t log p_t - p~_rest log p_rest - beta * sum_{i != t} q~_i log q_i`.
pub fn dkd_loss(z_student: &[f64], z_teacher: &[f64], target: usize, beta: f64) -> Result<f64> {
    Ok(dkd_loss_with_grad(z_student, z_teacher, target, beta)?.value)
}

pub fn dkd_loss_with_grad(
    z_student: &[f64],
    z_teacher: &[f64],
    target: usize,
    beta: f64,
) -> Result<LossGrad> {
    check_pair(z_student, z_teacher, target)?;
    let teacher = decouple_target(z_teacher, target)?;
    let mask = MaskVector::target_only(z_student.len(), target);
    let q_teacher = nontarget_distribution(z_teacher, target, &mask)?;
    let p = softmax(z_student)?;
    let (log_t, log_rest) = decouple_target_log(z_student, target)?;
    let mut grad = vec![0.0; z_student.len()];
    let mut value = add_target_nll(&p, log_t, target, teacher.target, &mut grad);
    value += add_rest_nll(z_student, &p, log_rest, target, teacher.rest, &mut grad);
    value += add_nontarget_ce(z_student, &q_teacher, target, &mask, beta, &mut grad)?;
    Ok(LossGrad { value, grad })
}

/// Gradient-bearing form of the simple target loss in logit space.
pub fn simple_target_with_grad(p_teacher: f64, z_student: &[f64], target: usize, alpha: f64) -> Result<LossGrad> {
    let p = softmax(z_student)?;
    let (log_t, _) = decouple_target_log(z_student, target)?;
    let mut grad = vec![0.0; z_student.len()];
    let value = add_target_nll(&p, log_t, target, alpha * p_teacher, &mut grad);
    Ok(LossGrad { value, grad })
}

/// Gradient-bearing form of the difficult target loss in logit space.
pub fn difficult_target_with_grad(p_teacher: f64, z_student: &[f64], target: usize, gamma: f64) -> Result<LossGrad> {
    let p = softmax(z_student)?;
    let (log_t, _) = decouple_target_log(z_student, target)?;
    let mut grad = vec![0.0; z_student.len()];
    let w = difficulty_weight(p_teacher, gamma);
    let value = add_target_nll(&p, log_t, target, w, &mut grad);
    Ok(LossGrad { value, grad })
}

/// Gradient-bearing non-target loss against a teacher distribution on the
/// same mask.
pub fn nontarget_with_grad(
    q_teacher: &[f64],
    z_student: &[f64],
    target: usize,
    mask: &MaskVector,
    beta: f64,
) -> Result<LossGrad> {
    let mut grad = vec![0.0; z_student.len()];
    let value = add_nontarget_ce(z_student, q_teacher, target, mask, beta, &mut grad)?;
    Ok(LossGrad { value, grad })
}

/// Label cross-entropy `-log p_y` and its gradient.
pub fn cross_entropy_with_grad(z: &[f64], label: usize) -> Result<LossGrad> {
    if label >= z.len() {
        return Err(Error::Index {
            index: label,
            len: z.len(),
        });
    }
    let log_p = log_softmax(z)?;
    let grad = log_p
        .iter()
        .enumerate()
        .map(|(i, lp)| lp.exp() - if i == label { 1.0 } else { 0.0 })
        .collect();
    Ok(LossGrad {
        value: -log_p[label],
        grad,
    })
}

/// Distillation terms of one peer, averaged over the batch.
#[derive(Debug, Clone)]
pub struct PeerDistill {
    pub tc: f64,
    pub nc: f64,
    /// `[batch x classes]` gradient of `tc + nc` w.r.t. this peer's logits.
    pub grad: Array2<f64>,
    /// Digest of the curriculum draw this peer consumed.
    pub draw_digest: u64,
    pub truncated: Vec<bool>,
}

fn check_batch(peers: &[Array2<f64>], labels: &[usize], draw: &CurriculumDraw) -> Result<(usize, usize)> {
    let first = peers
        .first()
        .ok_or_else(|| Error::Config("no peer logits supplied".into()))?;
    let (batch, classes) = first.dim();
    if peers.iter().any(|p| p.dim() != (batch, classes)) {
        return Err(Error::Shape("peer logit matrices differ in shape".into()));
    }
    if labels.len() != batch || draw.masks.len() != batch {
        return Err(Error::Shape(format!(
            "batch of {batch} rows, {} labels, {} masks",
            labels.len(),
            draw.masks.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Index {
            index: y,
            len: classes,
        });
    }
    Ok((batch, classes))
}

fn scaled(row: ArrayView1<f64>, temperature: f64) -> Vec<f64> {
    row.iter().map(|v| v / temperature).collect()
}

/// Per-sample teacher-side quantities for one peer.
struct TeacherView {
    split: Vec<TargetSplit>,
    q: Vec<Option<Vec<f64>>>,
}

fn teacher_view(
    logits: &Array2<f64>,
    labels: &[usize],
    draw: &CurriculumDraw,
    cfg: &DistillConfig,
    need_q: bool,
) -> Result<TeacherView> {
    let mut split = Vec::with_capacity(labels.len());
    let mut q = Vec::with_capacity(labels.len());
    for (m, &y) in labels.iter().enumerate() {
        let z = scaled(logits.row(m), cfg.temperature);
        split.push(decouple_target(&z, y)?);
        let mask = &draw.masks[m];
        q.push(if need_q && mask.kept_count() > 0 {
            Some(nontarget_distribution(&z, y, mask)?)
        } else {
            None
        });
    }
    Ok(TeacherView { split, q })
}

/// Peer `k`'s distillation loss: target and non-target terms against each
/// other peer as teacher, averaged over the `K - 1` teachers and the batch.
pub fn peer_distill_loss(
    k: usize,
    peers: &[Array2<f64>],
    labels: &[usize],
    cfg: &DistillConfig,
    draw: &CurriculumDraw,
) -> Result<PeerDistill> {
    let views = prepare_teachers(peers, labels, cfg, draw)?;
    peer_distill_loss_with(k, peers, labels, cfg, draw, &views)
}

struct Teachers {
    views: Vec<TeacherView>,
    truncated: Vec<bool>,
}

fn prepare_teachers(
    peers: &[Array2<f64>],
    labels: &[usize],
    cfg: &DistillConfig,
    draw: &CurriculumDraw,
) -> Result<Teachers> {
    check_batch(peers, labels, draw)?;
    if peers.len() < 2 {
        return Err(Error::Config(format!(
            "distillation needs at least two peers, got {}",
            peers.len()
        )));
    }
    let need_q = !cfg.ablation.no_nc;
    let views = peers
        .iter()
        .map(|p| teacher_view(p, labels, draw, cfg, need_q))
        .collect::<Result<Vec<_>>>()?;
    let target_probs: Vec<Vec<f64>> = views
        .iter()
        .map(|v| v.split.iter().map(|s| s.target).collect())
        .collect();
    let truncated = truncation_flags(&target_probs, cfg.epsilon);
    Ok(Teachers { views, truncated })
}

fn peer_distill_loss_with(
    k: usize,
    peers: &[Array2<f64>],
    labels: &[usize],
    cfg: &DistillConfig,
    draw: &CurriculumDraw,
    teachers: &Teachers,
) -> Result<PeerDistill> {
    let n_peers = peers.len();
    if k >= n_peers {
        return Err(Error::Index {
            index: k,
            len: n_peers,
        });
    }
    let (batch, classes) = peers[k].dim();
    let mut grad = Array2::<f64>::zeros((batch, classes));
    let mut tc_total = 0.0;
    let mut nc_total = 0.0;
    let teacher_scale = 1.0 / (n_peers - 1) as f64;
    let batch_scale = 1.0 / batch as f64;
    let ab = cfg.ablation;

    for m in 0..batch {
        let y = labels[m];
        let z = scaled(peers[k].row(m), cfg.temperature);
        let p = softmax(&z)?;
        let (log_t, log_rest) = decouple_target_log(&z, y)?;
        let mask = &draw.masks[m];
        let mut g = vec![0.0; classes];
        let mut tc = 0.0;
        let mut nc = 0.0;

        for (j, view) in teachers.views.iter().enumerate() {
            if j == k {
                continue;
            }
            let teacher = if teachers.truncated[m] {
                TargetSplit {
                    target: 1.0,
                    rest: 0.0,
                }
            } else {
                view.split[m]
            };
            if !ab.no_tc {
                match draw.phase {
                    Phase::Simple => {
                        tc += add_target_nll(&p, log_t, y, cfg.alpha * teacher.target, &mut g);
                        if cfg.rest_term {
                            tc += add_rest_nll(&z, &p, log_rest, y, teacher.rest, &mut g);
                        }
                    }
                    Phase::Difficult => {
                        let w = difficulty_weight(teacher.target, cfg.gamma);
                        tc += add_target_nll(&p, log_t, y, w, &mut g);
                    }
                }
            }
            if !ab.no_nc {
                if let Some(q_teacher) = &view.q[m] {
                    nc += add_nontarget_ce(&z, q_teacher, y, mask, cfg.beta, &mut g)?;
                }
            }
        }

        tc_total += tc * teacher_scale;
        nc_total += nc * teacher_scale;
        // d/dz of f(z / T) is f'(z / T) / T.
        let chain = teacher_scale * batch_scale / cfg.temperature;
        for (dst, src) in grad.row_mut(m).iter_mut().zip(&g) {
            *dst = src * chain;
        }
    }

    Ok(PeerDistill {
        tc: tc_total * batch_scale,
        nc: nc_total * batch_scale,
        grad,
        draw_digest: draw.digest(),
        truncated: teachers.truncated.clone(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PeerBreakdown {
    pub ce: f64,
    pub tc: f64,
    pub nc: f64,
}

impl PeerBreakdown {
    pub fn total(&self) -> f64 {
        self.ce + self.tc + self.nc
    }
}

#[derive(Debug, Clone)]
pub struct JointLoss {
    pub total: f64,
    pub per_peer: Vec<PeerBreakdown>,
    /// Per peer `[batch x classes]` gradient of that peer's own terms.
    pub grads: Vec<Array2<f64>>,
    pub draw_digests: Vec<u64>,
    pub truncated: Vec<bool>,
}

/// `sum_k CE_k + TC_k + NC_k`. A single peer is accepted only when both
/// distillation terms are ablated, which leaves plain cross-entropy.
pub fn joint_loss(
    peers: &[Array2<f64>],
    labels: &[usize],
    cfg: &DistillConfig,
    draw: &CurriculumDraw,
) -> Result<JointLoss> {
    let (batch, _) = check_batch(peers, labels, draw)?;
    let distill = !cfg.ablation.distillation_off();
    let teachers = if distill {
        Some(prepare_teachers(peers, labels, cfg, draw)?)
    } else {
        None
    };

    let mut per_peer = Vec::with_capacity(peers.len());
    let mut grads = Vec::with_capacity(peers.len());
    let mut digests = Vec::with_capacity(peers.len());
    for (k, logits) in peers.iter().enumerate() {
        let mut ce = 0.0;
        let mut grad = Array2::<f64>::zeros(logits.dim());
        for (m, &y) in labels.iter().enumerate() {
            let row = logits.row(m).to_vec();
            let lg = cross_entropy_with_grad(&row, y)?;
            ce += lg.value;
            for (dst, src) in grad.row_mut(m).iter_mut().zip(&lg.grad) {
                *dst = src / batch as f64;
            }
        }
        let mut breakdown = PeerBreakdown {
            ce: ce / batch as f64,
            ..Default::default()
        };
        if let Some(teachers) = &teachers {
            let d = peer_distill_loss_with(k, peers, labels, cfg, draw, teachers)?;
            breakdown.tc = d.tc;
            breakdown.nc = d.nc;
            grad += &d.grad;
            digests.push(d.draw_digest);
        } else {
            digests.push(draw.digest());
        }
        per_peer.push(breakdown);
        grads.push(grad);
    }

    let total = per_peer.iter().map(PeerBreakdown::total).sum();
    Ok(JointLoss {
        total,
        per_peer,
        grads,
        draw_digests: digests,
        truncated: teachers.map(|t| t.truncated).unwrap_or_else(|| vec![false; batch]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::nontarget::loss_nontarget;
    use crate::distill::target::{loss_difficult_target, loss_simple_target};
    use ndarray::array;

    #[test]
    fn dkd_self_distillation_is_decoupled_entropy() {
        let z = [0.3, -1.0, 2.0, 0.5];
        let t = 2;
        let split = decouple_target(&z, t).unwrap();
        let q = nontarget_distribution(&z, t, &MaskVector::target_only(4, t)).unwrap();
        let h_target = -(split.target * split.target.ln() + split.rest * split.rest.ln());
        let h_q: f64 = q.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum();
        let beta = 1.7;
        let v = dkd_loss(&z, &z, t, beta).unwrap();
        assert!((v - (h_target + beta * h_q)).abs() < 1e-12);
    }

    #[test]
    fn dkd_without_beta_is_target_terms() {
        let zs = [0.1, 0.9, -0.4];
        let zt = [1.2, -0.3, 0.0];
        let s = decouple_target(&zs, 0).unwrap();
        let t = decouple_target(&zt, 0).unwrap();
        let expect = -t.target * s.target.ln() - t.rest * s.rest.ln();
        assert!((dkd_loss(&zs, &zt, 0, 0.0).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn dkd_decomposes_into_component_losses() {
        let zs = [0.5, -0.2, 1.4, 0.0, -2.0, 0.7];
        let zt = [1.0, 0.3, -0.5, 0.2, 0.9, -1.1];
        let target = 3;
        let beta = 2.5;
        let s = decouple_target(&zs, target).unwrap();
        let t = decouple_target(&zt, target).unwrap();
        let mask = MaskVector::target_only(6, target);
        let qs = nontarget_distribution(&zs, target, &mask).unwrap();
        let qt = nontarget_distribution(&zt, target, &mask).unwrap();
        let expect = loss_simple_target(t.target, s.target, 1.0)
            + loss_simple_target(t.rest, s.rest, 1.0)
            + loss_nontarget(&qt, &qs, beta).unwrap();
        assert!((dkd_loss(&zs, &zt, target, beta).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn single_peer_rejected_for_distillation() {
        let z = array![[0.0, 1.0, 2.0]];
        let draw = CurriculumDraw::conventional(Phase::Simple, &[1], 3);
        let cfg = DistillConfig::default();
        assert!(peer_distill_loss(0, &[z.clone()], &[1], &cfg, &draw).is_err());
        assert!(joint_loss(&[z], &[1], &cfg, &draw).is_err());
    }

    #[test]
    fn two_peers_reduce_to_pairwise_loss() {
        let a = array![[0.2, -0.5, 1.0, 0.3], [1.5, 0.0, -1.0, 0.4]];
        let b = array![[0.0, 0.7, -0.2, 0.1], [0.3, 0.2, 0.9, -0.6]];
        let labels = [2, 0];
        let cfg = DistillConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        let draw = CurriculumDraw::conventional(Phase::Difficult, &labels, 4);
        let out = peer_distill_loss(0, &[a.clone(), b.clone()], &labels, &cfg, &draw).unwrap();
        let mut tc = 0.0;
        let mut nc = 0.0;
        for m in 0..2 {
            let y = labels[m];
            let za = a.row(m).to_vec();
            let zb = b.row(m).to_vec();
            let pa = decouple_target(&za, y).unwrap().target;
            let pb = decouple_target(&zb, y).unwrap().target;
            tc += loss_difficult_target(pb, pa, cfg.gamma);
            let mask = &draw.masks[m];
            let qa = nontarget_distribution(&za, y, mask).unwrap();
            let qb = nontarget_distribution(&zb, y, mask).unwrap();
            nc += loss_nontarget(&qb, &qa, cfg.beta).unwrap();
        }
        assert!((out.tc - tc / 2.0).abs() < 1e-12);
        assert!((out.nc - nc / 2.0).abs() < 1e-12);
    }

    #[test]
    fn all_distillation_off_is_cross_entropy() {
        let a = array![[0.2, -0.5, 1.0], [1.5, 0.0, -1.0]];
        let labels = [2, 1];
        let mut cfg = DistillConfig::default();
        cfg.ablation.no_tc = true;
        cfg.ablation.no_nc = true;
        let draw = CurriculumDraw::conventional(Phase::Simple, &labels, 3);
        let out = joint_loss(&[a.clone()], &labels, &cfg, &draw).unwrap();
        let ce: f64 = (0..2)
            .map(|m| -log_softmax(&a.row(m).to_vec()).unwrap()[labels[m]])
            .sum::<f64>()
            / 2.0;
        assert!((out.total - ce).abs() < 1e-12);
        assert_eq!(out.per_peer[0].tc, 0.0);
        assert_eq!(out.per_peer[0].nc, 0.0);
    }

    #[test]
    fn empty_kept_set_skips_nontarget_term() {
        let a = array![[0.2, -0.5, 1.0]];
        let b = array![[0.1, 0.5, -1.0]];
        let labels = [0];
        let cfg = DistillConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        let draw = CurriculumDraw {
            t: 0.0,
            draw: 0.5,
            phase: Phase::Simple,
            masks: vec![MaskVector::from_flags(vec![true; 3])],
        };
        let out = joint_loss(&[a, b], &labels, &cfg, &draw).unwrap();
        assert_eq!(out.per_peer[0].nc, 0.0);
        assert!(out.per_peer[0].tc > 0.0);
    }
}
