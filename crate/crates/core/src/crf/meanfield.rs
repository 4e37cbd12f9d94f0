use crate::imagery::{Frame, LabelMap};

use super::pairwise::{labeling_energy, PairwiseGraph};
use super::{CrfConfig, CrfError, MarginalField, UnaryField};

#[derive(Debug, Clone)]
pub struct MeanFieldResult {
    /// Lowest-energy argmax decoding seen across sweeps.
    pub labels: LabelMap,
    /// Marginals after the last sweep.
    pub marginals: MarginalField,
    /// Free energy of the initial marginals, then after every sweep.
    pub free_energy: Vec<f64>,
    /// Energy of `labels`.
    pub energy: f64,
    pub sweeps: usize,
}

fn softmax_neg(costs: &[f64], out: &mut [f64]) {
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for (o, &c) in out.iter_mut().zip(costs) {
        *o = (min - c).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

fn argmax_labels(q: &[f64], c: usize) -> Vec<u8> {
    q.chunks_exact(c)
        .map(|row| {
            // strict comparison: lowest class index wins ties
            let mut best = 0;
            for l in 1..c {
                if row[l] > row[best] {
                    best = l;
                }
            }
            best as u8
        })
        .collect()
}

/// Mean-field free energy
/// `Σ_n Σ_l Q_n(l) u_n(l) + λ2 Σ_{pairs} w_mn (1 − Σ_l Q_m(l) Q_n(l)) + Σ Q ln Q`.
fn free_energy(q: &[f64], unary: &[f64], c: usize, lambda2: f64, graph: &PairwiseGraph) -> f64 {
    let mut expected = 0.0;
    let mut entropy = 0.0;
    let mut pair = 0.0;
    for i in 0..graph.len() {
        let qi = &q[i * c..(i + 1) * c];
        for (l, &p) in qi.iter().enumerate() {
            expected += p * unary[i * c + l];
            if p > 0.0 {
                entropy += p * p.ln();
            }
        }
        for (n, wgt) in graph.forward_neighbors(i) {
            let qn = &q[n * c..(n + 1) * c];
            let agree: f64 = qi.iter().zip(qn).map(|(a, b)| a * b).sum();
            pair += wgt * (1.0 - agree);
        }
    }
    expected + lambda2 * pair + entropy
}

/// Raster-order greedy descent: each pixel moves to the label of strictly
/// lowest conditional energy given its neighbors. Returns whether anything
/// changed.
fn polish(labels: &mut [u8], unary: &[f64], c: usize, lambda2: f64, graph: &PairwiseGraph, max_sweeps: usize) -> bool {
    let mut any = false;
    let mut cost = vec![0.0; c];
    for _ in 0..max_sweeps {
        let mut changed = false;
        for i in 0..labels.len() {
            cost.copy_from_slice(&unary[i * c..(i + 1) * c]);
            for (m, wgt) in graph.neighbors(i) {
                let lm = labels[m] as usize;
                for (l, e) in cost.iter_mut().enumerate() {
                    if l != lm {
                        *e += lambda2 * wgt;
                    }
                }
            }
            let cur = labels[i] as usize;
            let mut best = cur;
            for l in 0..c {
                if cost[l] < cost[best] {
                    best = l;
                }
            }
            if best != cur {
                labels[i] = best as u8;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        any = true;
    }
    any
}

/// Sequential (raster-order) mean-field inference on the grid CRF.
///
/// Each pixel update sets
/// `Q_n(l) ∝ exp(−u_n(l) − λ2 Σ_m w_nm (1 − Q_m(l)))` and mixes it with the
/// previous value by `damping`. Sweeps stop after `mf_iterations` or once the
/// largest per-pixel L1 change drops below `mf_tolerance`. The argmax
/// labeling after every sweep (and at initialization) is scored with the
/// exact energy; the best one is then refined by up to `polish_sweeps`
/// greedy single-pixel sweeps, which never raise the energy.
pub fn mean_field_infer(
    motion: &UnaryField,
    appearance: &UnaryField,
    frame: &Frame,
    cfg: &CrfConfig,
    init: Option<&MarginalField>,
) -> Result<MeanFieldResult, CrfError> {
    cfg.validate()?;
    motion.check_like(appearance)?;
    if motion.width() != frame.width() || motion.height() != frame.height() {
        return Err(CrfError::DimensionMismatch(format!(
            "unaries {}x{} vs frame {}x{}",
            motion.width(),
            motion.height(),
            frame.width(),
            frame.height()
        )));
    }
    let c = motion.num_classes();
    let (w, h) = (frame.width(), frame.height());
    let n = w * h;

    let mut unary = Vec::with_capacity(n * c);
    for (k, (&m, &a)) in motion.costs().iter().zip(appearance.costs()).enumerate() {
        let u = m + cfg.lambda1 * a;
        if !u.is_finite() {
            return Err(CrfError::NonFiniteUnary {
                pixel: k / c,
                class: k % c,
            });
        }
        unary.push(u);
    }

    let mut q = vec![0.0; n * c];
    match init {
        Some(m) => {
            if (m.width(), m.height(), m.num_classes()) != (w, h, c) {
                return Err(CrfError::DimensionMismatch("initial marginals".into()));
            }
            q.copy_from_slice(m.probs());
        }
        None => {
            for i in 0..n {
                softmax_neg(&unary[i * c..(i + 1) * c], &mut q[i * c..(i + 1) * c]);
            }
        }
    }

    let graph = PairwiseGraph::from_config(frame, cfg);
    let lambda2 = cfg.lambda2;
    let mut best_labels = argmax_labels(&q, c);
    if cfg.polish_sweeps > 0 {
        polish(&mut best_labels, &unary, c, lambda2, &graph, cfg.polish_sweeps);
    }
    let mut best_energy =
        labeling_energy(&best_labels, motion, appearance, cfg.lambda1, lambda2, &graph);
    let mut trace = vec![free_energy(&q, &unary, c, lambda2, &graph)];

    let mut energies = vec![0.0; c];
    let mut fresh = vec![0.0; c];
    let mut sweeps = 0;
    for _ in 0..cfg.mf_iterations {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for i in 0..n {
            energies.copy_from_slice(&unary[i * c..(i + 1) * c]);
            if lambda2 != 0.0 {
                for (m, wgt) in graph.neighbors(i) {
                    let qm = &q[m * c..(m + 1) * c];
                    for (e, &p) in energies.iter_mut().zip(qm) {
                        *e += lambda2 * wgt * (1.0 - p);
                    }
                }
            }
            softmax_neg(&energies, &mut fresh);
            let qi = &mut q[i * c..(i + 1) * c];
            let mut change = 0.0;
            for (old, &new) in qi.iter_mut().zip(&fresh) {
                let mixed = (1.0 - cfg.damping) * new + cfg.damping * *old;
                change += (mixed - *old).abs();
                *old = mixed;
            }
            max_change = max_change.max(change);
        }
        trace.push(free_energy(&q, &unary, c, lambda2, &graph));
        let mut labels = argmax_labels(&q, c);
        if cfg.polish_sweeps > 0 {
            polish(&mut labels, &unary, c, lambda2, &graph, cfg.polish_sweeps);
        }
        if labels != best_labels {
            let e = labeling_energy(&labels, motion, appearance, cfg.lambda1, lambda2, &graph);
            if e < best_energy {
                best_energy = e;
                best_labels = labels;
            }
        }
        if max_change < cfg.mf_tolerance {
            break;
        }
    }

    Ok(MeanFieldResult {
        labels: LabelMap::new(w, h, best_labels, c)?,
        marginals: MarginalField::from_probs(w, h, c, q)?,
        free_energy: trace,
        energy: best_energy,
        sweeps,
    })
}
