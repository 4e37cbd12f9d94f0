use crate::cues::{fit_appearance, ClassAppearanceModel, CueConfig};
use crate::imagery::{FlowField, Frame, LabelMap};
use crate::par::Exec;

use super::{appearance_unary, mean_field_infer, motion_unary_with, CrfConfig, CrfError, MarginalField};

#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedFrame {
    /// 1-based distance from the ground-truth frame.
    pub offset: usize,
    pub labels: LabelMap,
    pub marginals: MarginalField,
    pub free_energy: f64,
    pub energy: f64,
    pub iterations: usize,
    /// Pixels whose label differs from the previous frame's labeling.
    pub changed_pixels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationResult {
    pub appearance: ClassAppearanceModel,
    pub frames: Vec<PropagatedFrame>,
}

/// Propagates a ground-truth labeling through `cfg.depth` subsequent frames.
///
/// `frames[k]` is the frame at offset `k + 1`; `flows[k]` maps offset `k` to
/// `k + 1`, with offset 0 being `gt_frame`. The color model is fit once on
/// the ground-truth pair and reused for every step; each inferred labeling
/// is the reference for the next step.
pub fn propagate_sequence(
    gt_frame: &Frame,
    gt_labels: &LabelMap,
    frames: &[Frame],
    flows: &[FlowField],
    cfg: &CrfConfig,
    cues: &CueConfig,
    exec: Exec,
) -> Result<PropagationResult, CrfError> {
    cfg.validate()?;
    if frames.len() < cfg.depth || flows.len() < cfg.depth {
        return Err(CrfError::InsufficientFrames {
            needed: cfg.depth,
            frames: frames.len(),
            flows: flows.len(),
        });
    }
    let c = gt_labels.num_classes();
    let appearance = fit_appearance(gt_frame, gt_labels, c, cues)?;

    let mut out = Vec::with_capacity(cfg.depth);
    let mut prev_frame = gt_frame;
    let mut prev_labels = gt_labels.clone();
    for (t, (next, flow)) in frames.iter().zip(flows).take(cfg.depth).enumerate() {
        let offset = t + 1;
        let at = |e: CrfError| CrfError::AtFrame {
            offset,
            source: Box::new(e),
        };
        let motion = motion_unary_with(&prev_labels, prev_frame, next, flow, cfg.alpha, cues, exec)
            .map_err(at)?;
        let app = appearance_unary(&appearance, next, c, exec).map_err(at)?;
        let r = mean_field_infer(&motion, &app, next, cfg, None).map_err(at)?;
        out.push(PropagatedFrame {
            offset,
            changed_pixels: r.labels.diff_count(&prev_labels),
            free_energy: *r.free_energy.last().expect("trace is never empty"),
            energy: r.energy,
            iterations: r.sweeps,
            marginals: r.marginals,
            labels: r.labels.clone(),
        });
        prev_labels = r.labels;
        prev_frame = next;
    }
    Ok(PropagationResult {
        appearance,
        frames: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth::{render_sequence, SynthConfig};

    #[test]
    fn static_sequence_is_a_fixed_point() {
        let cfg = SynthConfig {
            num_objects: 0,
            ..SynthConfig::small()
        };
        let seq = render_sequence(&cfg, 0).unwrap();
        let crf = CrfConfig::default();
        let r = propagate_sequence(
            &seq.frames[0],
            &seq.labels[0],
            &seq.frames[1..],
            &seq.flows,
            &crf,
            &CueConfig::default(),
            Exec::default(),
        )
        .unwrap();
        assert_eq!(r.frames.len(), 5);
        for p in &r.frames {
            assert_eq!(p.labels, seq.labels[0]);
            assert_eq!(p.changed_pixels, 0);
        }
    }

    #[test]
    fn static_scene_with_objects_is_a_fixed_point() {
        // objects present but never moving
        let cfg = SynthConfig {
            max_speed: 0,
            brightness_drift: 0.0,
            ..SynthConfig::small()
        };
        let seq = render_sequence(&cfg, 3).unwrap();
        assert!(seq.frames.windows(2).all(|w| w[0] == w[1]));
        let r = propagate_sequence(
            &seq.frames[0],
            &seq.labels[0],
            &seq.frames[1..],
            &seq.flows,
            &CrfConfig::default(),
            &CueConfig::default(),
            Exec::default(),
        )
        .unwrap();
        for p in &r.frames {
            assert_eq!(p.labels.diff_count(&seq.labels[0]), 0);
        }
    }

    #[test]
    fn translating_objects_track_truth() {
        let cfg = SynthConfig::small();
        for s in 0..3 {
            let seq = render_sequence(&cfg, s).unwrap();
            let r = propagate_sequence(
                &seq.frames[0],
                &seq.labels[0],
                &seq.frames[1..],
                &seq.flows,
                &CrfConfig::default(),
                &CueConfig::default(),
                Exec::default(),
            )
            .unwrap();
            let acc = |k: usize| {
                let truth = &seq.labels[k + 1];
                1.0 - r.frames[k].labels.diff_count(truth) as f64 / truth.len() as f64
            };
            assert!(acc(0) >= 0.99, "seq {s}: offset-1 accuracy {}", acc(0));
        }
    }

    #[test]
    fn deterministic_and_exec_independent() {
        let cfg = SynthConfig::small();
        let seq = render_sequence(&cfg, 5).unwrap();
        let run = |exec| {
            propagate_sequence(
                &seq.frames[0],
                &seq.labels[0],
                &seq.frames[1..],
                &seq.flows,
                &CrfConfig::default(),
                &CueConfig::default(),
                exec,
            )
            .unwrap()
        };
        let a = run(Exec::Sequential);
        let b = run(Exec::Parallel);
        let c = run(Exec::Parallel);
        assert_eq!(a, b);
        assert_eq!(b, c);
    }

    #[test]
    fn insufficient_frames() {
        let seq = render_sequence(&SynthConfig::small(), 0).unwrap();
        let err = propagate_sequence(
            &seq.frames[0],
            &seq.labels[0],
            &seq.frames[1..3],
            &seq.flows,
            &CrfConfig::default(),
            &CueConfig::default(),
            Exec::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CrfError::InsufficientFrames { needed: 5, frames: 2, .. }));
    }
}
