use crate::cues::{motion_weight, neg_log_likelihood, patch_histogram, ClassAppearanceModel, CueConfig};
use crate::imagery::{FlowField, Frame, LabelMap, VOID};
use crate::par::Exec;

use super::{CrfError, UnaryField};

/// Flow-carried disagreement costs for frame `t+1`.
///
/// Every non-void source pixel of frame `t` is moved by its flow vector and
/// rounded to the nearest pixel; in-image targets receive a vote of weight
/// `motion_weight(patch at source, patch at target)` against every label
/// other than the source label. Pixels that receive no vote keep an
/// all-zero cost vector.
pub fn motion_unary(
    prev_labels: &LabelMap,
    prev_frame: &Frame,
    next_frame: &Frame,
    flow: &FlowField,
    alpha: f64,
    cues: &CueConfig,
) -> Result<UnaryField, CrfError> {
    motion_unary_with(prev_labels, prev_frame, next_frame, flow, alpha, cues, Exec::default())
}

pub fn motion_unary_with(
    prev_labels: &LabelMap,
    prev_frame: &Frame,
    next_frame: &Frame,
    flow: &FlowField,
    alpha: f64,
    cues: &CueConfig,
    exec: Exec,
) -> Result<UnaryField, CrfError> {
    if !(prev_frame.same_size(prev_labels)
        && prev_frame.same_size(next_frame)
        && prev_frame.same_size(flow))
    {
        return Err(CrfError::DimensionMismatch(format!(
            "motion inputs: labels {}x{}, frames {}x{} / {}x{}, flow {}x{}",
            prev_labels.width(),
            prev_labels.height(),
            prev_frame.width(),
            prev_frame.height(),
            next_frame.width(),
            next_frame.height(),
            flow.width(),
            flow.height()
        )));
    }
    let (w, h) = (prev_frame.width(), prev_frame.height());
    let c = prev_labels.num_classes();

    // weights are computed per source pixel (the expensive part), then
    // scattered in raster order so the result does not depend on `exec`
    let votes = exec.map_range(w * h, |src| -> Result<Option<(usize, u8, f64)>, CrfError> {
        let label = prev_labels.labels()[src];
        if label == VOID {
            return Ok(None);
        }
        let (x, y) = (src % w, src / w);
        let [u, v] = flow.vectors()[src];
        let tx = (x as f64 + f64::from(u)).round();
        let ty = (y as f64 + f64::from(v)).round();
        if tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
            return Ok(None);
        }
        let (tx, ty) = (tx as usize, ty as usize);
        let a = patch_histogram(prev_frame, (x, y), cues.patch_radius, cues.bins, cues.smoothing)?;
        let b = patch_histogram(next_frame, (tx, ty), cues.patch_radius, cues.bins, cues.smoothing)?;
        Ok(Some((ty * w + tx, label, motion_weight(&a, &b, alpha)?)))
    });

    let mut field = UnaryField::zeros(w, h, c);
    for vote in votes {
        if let Some((target, label, weight)) = vote? {
            let row = &mut field.costs[target * c..(target + 1) * c];
            for (l, cost) in row.iter_mut().enumerate() {
                if l != usize::from(label) {
                    *cost += weight;
                }
            }
        }
    }
    Ok(field)
}

/// Color negative log-likelihood of every pixel under every class mixture.
pub fn appearance_unary(
    model: &ClassAppearanceModel,
    next_frame: &Frame,
    num_classes: usize,
    exec: Exec,
) -> Result<UnaryField, CrfError> {
    if model.num_classes() != num_classes {
        return Err(CrfError::ClassMismatch {
            expected: num_classes,
            found: model.num_classes(),
        });
    }
    let (w, h) = (next_frame.width(), next_frame.height());
    let mut costs = vec![0.0; w * h * num_classes];
    let mut failure = std::sync::Mutex::new(None);
    exec.for_each_chunk(&mut costs, num_classes, |i, row| {
        let color = next_frame.color_at(i);
        for (l, cost) in row.iter_mut().enumerate() {
            match neg_log_likelihood(model, l, &color) {
                Ok(v) => *cost = v,
                Err(e) => {
                    failure.lock().expect("poisoned").get_or_insert(e);
                }
            }
        }
    });
    if let Some(e) = failure.get_mut().expect("poisoned").take() {
        return Err(e.into());
    }
    UnaryField::from_costs(w, h, num_classes, costs)
}
