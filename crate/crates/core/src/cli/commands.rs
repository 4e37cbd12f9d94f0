use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{CliError, Command, RunConfig, Scheme};
use crate::crf::propagate_sequence;
use crate::datasets::synth::{flow_name, frame_name, labels_name};
use crate::datasets::{
    accumulate, build_agt_sets, estimate_flow_with, jitter_labels, random_sets, rated_sets, sequential_sets,
    synth_corpus, with_gt, PgtIndex, PgtItem, TrainSet,
};
use crate::imagery::{
    load_image, load_labels, load_manifest, load_ratings, read_flow, write_labels, write_manifest, write_ratings,
    DatasetManifest, Frame, LabelMap, ManifestEntry, Palette, Ratings, Tier,
};
use crate::metrics::write_report;
use crate::par::Exec;
use crate::trainer::{evaluate, load_snapshot, round_trip, save_snapshot, train, write_log, TinySegModel, TrainSample};

pub(super) fn dispatch(cmd: Command, mut cfg: RunConfig, out: &Path, overwrite: bool) -> Result<(), CliError> {
    // argument checks that must fail before any output is touched
    match &cmd {
        Command::Train { tf: Some(tf), .. } if !(0.0..=1.0).contains(tf) => {
            return Err(CliError::Validation(format!("trust factor {tf} outside [0, 1]")));
        }
        Command::MakeSets { scheme: Scheme::Rated, ratings: None, .. } => {
            return Err(CliError::Validation("the rated scheme needs --ratings <csv>".into()));
        }
        _ => {}
    }
    if let Command::Train { tf: Some(tf), .. } = &cmd {
        cfg.train.pgt_trust = *tf;
    }
    if let Command::Propagate { estimate_flow: true, .. } = &cmd {
        cfg.flow.estimate = true;
    }
    if let Command::Sweep { parallel: true, .. } = &cmd {
        cfg.sweep.parallel = true;
    }
    validate(&cmd, &cfg)?;
    prepare_out(out, overwrite)?;
    cfg.write(out)?;
    match cmd {
        Command::Synth => synth(&cfg, out),
        Command::Propagate { corpus, .. } => propagate(&cfg, &corpus, out),
        Command::MakeSets { scheme, index, gt, ratings } => make_sets(&cfg, scheme, &index, &gt, ratings.as_deref(), out),
        Command::Jitter { gt, palette } => jitter(&cfg, &gt, palette.as_deref(), out),
        Command::Train { sets, val, palette, .. } => train_cmd(&cfg, &sets, &val, palette.as_deref(), out),
        Command::Eval { model, manifest, palette } => eval(&model, &manifest, palette.as_deref(), out),
        Command::Sweep { sets, val, palette, .. } => sweep(&cfg, &sets, &val, palette.as_deref(), out),
    }
}

fn validate(cmd: &Command, cfg: &RunConfig) -> Result<(), CliError> {
    match cmd {
        Command::Synth => cfg.synth.validate().map_err(CliError::invalid),
        Command::Propagate { .. } => {
            cfg.crf.validate().map_err(CliError::invalid)?;
            if cfg.flow.block == 0 {
                return Err(CliError::Validation("flow.block must be positive".into()));
            }
            Ok(())
        }
        Command::Jitter { .. } => {
            cfg.jitter.config().validate().map_err(CliError::invalid)?;
            if cfg.jitter.copies < 3 {
                return Err(CliError::Validation(format!("jitter.copies {} < 3", cfg.jitter.copies)));
            }
            Ok(())
        }
        Command::Train { .. } => cfg.train.validate().map_err(CliError::invalid),
        Command::Sweep { .. } => {
            cfg.train.validate().map_err(CliError::invalid)?;
            let s = &cfg.sweep;
            if s.trust_factors.is_empty() || s.seeds.is_empty() {
                return Err(CliError::Validation("sweep needs at least one trust factor and one seed".into()));
            }
            if let Some(tf) = s.trust_factors.iter().find(|t| !(0.0..=1.0).contains(*t)) {
                return Err(CliError::Validation(format!("trust factor {tf} outside [0, 1]")));
            }
            Ok(())
        }
        Command::MakeSets { .. } | Command::Eval { .. } => Ok(()),
    }
}

fn prepare_out(out: &Path, overwrite: bool) -> Result<(), CliError> {
    if out.exists() {
        let mut entries = std::fs::read_dir(out).map_err(|e| CliError::io(out, e))?;
        if entries.next().is_some() && !overwrite {
            return Err(CliError::Validation(format!(
                "output directory {} is not empty (pass --overwrite)",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

fn load_manifest_arg(path: &Path) -> Result<DatasetManifest, CliError> {
    load_manifest(path).map_err(CliError::invalid)
}

/// `--palette`, or `palette.csv` beside `near`.
fn resolve_palette(explicit: Option<&Path>, near: &Path) -> Result<Palette, CliError> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => near.parent().unwrap_or(Path::new(".")).join("palette.csv"),
    };
    Palette::load(&path).map_err(|e| CliError::Validation(format!("palette: {e}")))
}

fn csv_writer(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, CliError> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let c = synth_corpus(&cfg.synth, out, Exec::default()).map_err(CliError::runtime)?;
    println!(
        "wrote {} training and {} validation sequences of {} frames ({}x{}, {} classes) to {}",
        c.sequences.len(),
        c.val_sequences.len(),
        cfg.synth.num_frames,
        cfg.synth.width,
        cfg.synth.height,
        cfg.synth.num_classes,
        out.display()
    );
    Ok(())
}

struct PropagatedSeq {
    items: Vec<PgtItem>,
    log: Vec<String>,
    /// `(offset, accuracy)` against the corpus labels, when present.
    accuracy: Vec<(u32, f64)>,
}

/// Maps pixel accuracy to a 1..=9 rating: 0.9 or less is 1, exact is 9.
fn accuracy_rating(acc: f64) -> u8 {
    (1.0 + 8.0 * ((acc - 0.9) / 0.1).clamp(0.0, 1.0)).round() as u8
}

fn propagate_one(
    cfg: &RunConfig,
    row: &ManifestEntry,
    classes: usize,
    out: &Path,
    exec: Exec,
) -> Result<PropagatedSeq, String> {
    let seq = &row.seq;
    let fail = |e: &dyn std::fmt::Display| format!("sequence {seq}: {e}");
    let dir = row.image.parent().unwrap_or(Path::new("."));
    let depth = cfg.crf.depth;
    let gt_frame = load_image(&row.image).map_err(|e| fail(&e))?;
    let gt_labels = load_labels(&row.labels, classes).map_err(|e| fail(&e))?;
    let frames: Vec<Frame> = (1..=depth)
        .map(|t| load_image(&dir.join(frame_name(t))))
        .collect::<Result<_, _>>()
        .map_err(|e| fail(&e))?;
    let mut flows = Vec::with_capacity(depth);
    for t in 0..depth {
        let p = dir.join(flow_name(t));
        if p.exists() {
            flows.push(read_flow(&p).map_err(|e| fail(&e))?);
        } else if cfg.flow.estimate {
            let prev = if t == 0 { &gt_frame } else { &frames[t - 1] };
            let f = estimate_flow_with(prev, &frames[t], cfg.flow.block, cfg.flow.search, exec).map_err(|e| fail(&e))?;
            flows.push(f);
        } else {
            return Err(fail(&format!(
                "missing flow {} (pass --estimate-flow to estimate it)",
                p.display()
            )));
        }
    }
    let r = propagate_sequence(&gt_frame, &gt_labels, &frames, &flows, &cfg.crf, &cfg.cues, exec).map_err(|e| fail(&e))?;

    let seq_out = out.join(seq);
    std::fs::create_dir_all(&seq_out).map_err(|e| fail(&e))?;
    let mut res = PropagatedSeq {
        items: Vec::new(),
        log: Vec::new(),
        accuracy: Vec::new(),
    };
    for p in &r.frames {
        let path = seq_out.join(format!("pgt_{:02}.png", p.offset));
        write_labels(&path, &p.labels).map_err(|e| fail(&e))?;
        let truth_path = dir.join(labels_name(p.offset));
        let acc = if truth_path.exists() {
            let truth = load_labels(&truth_path, classes).map_err(|e| fail(&e))?;
            let scored = truth.len() - truth.count_void();
            let agree = p
                .labels
                .labels()
                .iter()
                .zip(truth.labels())
                .filter(|(a, b)| **b != crate::imagery::VOID && a == b)
                .count();
            let acc = if scored == 0 { 1.0 } else { agree as f64 / scored as f64 };
            res.accuracy.push((p.offset as u32, acc));
            format!("{acc:.6}")
        } else {
            String::new()
        };
        res.log.push(format!(
            "{seq},{},{},{:.6},{:.6},{},{acc}",
            p.offset, p.iterations, p.energy, p.free_energy, p.changed_pixels
        ));
        res.items.push(PgtItem {
            seq: seq.clone(),
            offset: p.offset as u32,
            image: dir.join(frame_name(p.offset)),
            labels: path.canonicalize().map_err(|e| fail(&e))?,
            rating: None,
        });
    }
    Ok(res)
}

fn propagate(cfg: &RunConfig, corpus: &Path, out: &Path) -> Result<(), CliError> {
    let manifest = load_manifest_arg(&corpus.join("manifest.csv"))?;
    let palette = resolve_palette(None, &corpus.join("manifest.csv"))?;
    let rows: Vec<ManifestEntry> = manifest.entries.into_iter().filter(|e| e.tier == Tier::Gt).collect();
    if rows.is_empty() {
        return Err(CliError::Validation("corpus manifest has no ground-truth rows".into()));
    }
    let exec = Exec::default();
    let results = exec.map_slice(&rows, |row| propagate_one(cfg, row, palette.len(), out, Exec::Sequential));

    let mut items = Vec::new();
    let mut ratings = Ratings::default();
    let mut rated_all = true;
    let mut failures = Vec::new();
    let log_path = out.join("propagate_log.csv");
    let mut log = csv_writer(&log_path)?;
    let w = |e| CliError::io(&log_path, e);
    writeln!(log, "seq,offset,iterations,energy,free_energy,changed_pixels,accuracy").map_err(w)?;
    for (row, r) in rows.iter().zip(results) {
        match r {
            Ok(r) => {
                for line in &r.log {
                    writeln!(log, "{line}").map_err(w)?;
                }
                rated_all &= r.accuracy.len() == r.items.len();
                for (offset, acc) in &r.accuracy {
                    ratings.by_item.insert((row.seq.clone(), *offset), accuracy_rating(*acc));
                }
                items.extend(r.items);
            }
            Err(e) => {
                eprintln!("{e}");
                failures.push(row.seq.clone());
            }
        }
    }
    log.flush().map_err(w)?;
    let index = PgtIndex::new(items).map_err(CliError::runtime)?;
    write_manifest(&out.join("pgt.csv"), &index.to_manifest(), false).map_err(CliError::runtime)?;
    if rated_all && !index.is_empty() {
        write_ratings(&out.join("ratings.csv"), &ratings).map_err(CliError::runtime)?;
    }
    println!(
        "propagated {} of {} sequences, {} labelings indexed",
        rows.len() - failures.len(),
        rows.len(),
        index.len()
    );
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("{} sequence(s) failed: {}", failures.len(), failures.join(", "))))
    }
}

fn gt_set(path: &Path) -> Result<TrainSet, CliError> {
    let m = load_manifest_arg(path)?;
    let rows = m.entries.into_iter().filter(|e| e.tier == Tier::Gt).collect();
    TrainSet::new("GT", rows).map_err(CliError::invalid)
}

fn write_set(out: &Path, set: &TrainSet) -> Result<(), CliError> {
    let m = set.to_manifest().map_err(CliError::runtime)?;
    write_manifest(&out.join(format!("{}.csv", set.name)), &m, true).map_err(CliError::runtime)
}

fn make_sets(
    cfg: &RunConfig,
    scheme: Scheme,
    index: &Path,
    gt: &Path,
    ratings: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let index = PgtIndex::from_manifest(&load_manifest_arg(index)?).map_err(CliError::invalid)?;
    let gt = gt_set(gt)?;
    let sets = match scheme {
        Scheme::Sequential => sequential_sets(&index).map_err(CliError::invalid)?,
        Scheme::Rated => {
            let path = ratings.expect("checked before dispatch");
            let r = load_ratings(path).map_err(CliError::invalid)?;
            rated_sets(&index, &r).map_err(CliError::invalid)?
        }
        Scheme::Random => random_sets(&index, cfg.sets.seed),
    };
    write_set(out, &gt)?;
    for s in &sets {
        write_set(out, s)?;
        write_set(out, &with_gt(&gt, s).map_err(CliError::runtime)?)?;
    }
    for k in 2..=sets.len() {
        write_set(out, &accumulate(&gt, &sets, k).map_err(CliError::runtime)?)?;
    }
    let sizes: Vec<String> = sets.iter().map(|s| format!("{}={}", s.name, s.len())).collect();
    println!("GT={} {}", gt.len(), sizes.join(" "));
    Ok(())
}

fn jitter(cfg: &RunConfig, gt: &Path, palette: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let gt_path = gt;
    let gt = gt_set(gt_path)?;
    let classes = resolve_palette(palette, gt_path)?.len();
    let jc = cfg.jitter.config();
    let jobs: Vec<(usize, &ManifestEntry)> = gt.samples().iter().enumerate().collect();
    let paths = Exec::default().map_slice(&jobs, |&(i, row)| -> Result<Vec<PathBuf>, CliError> {
        let labels = load_labels(&row.labels, classes).map_err(CliError::invalid)?;
        (1..=cfg.jitter.copies)
            .map(|k| {
                let seed = cfg.jitter.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((i as u64) << 16 | k as u64);
                let j = jitter_labels(&labels, &jc, seed).map_err(CliError::runtime)?;
                let p = out.join(format!("{}_j{k}.png", row.seq));
                write_labels(&p, &j).map_err(CliError::runtime)?;
                p.canonicalize().map_err(|e| CliError::io(&p, e))
            })
            .collect()
    });
    let paths: Vec<Vec<PathBuf>> = paths.into_iter().collect::<Result<_, _>>()?;
    write_set(out, &gt)?;
    for s in build_agt_sets(&gt, &paths).map_err(CliError::runtime)? {
        write_set(out, &s)?;
    }
    println!("wrote {} jittered copies of {} labelings", cfg.jitter.copies, gt.len());
    Ok(())
}

/// Loaded manifest rows with the trust each PGT row carries, if any.
struct LoadedSet {
    name: String,
    rows: Vec<(Frame, LabelMap, Tier, Option<f64>)>,
}

fn load_set(paths: &[PathBuf], classes: usize) -> Result<LoadedSet, CliError> {
    let mut rows = Vec::new();
    for p in paths {
        for e in load_manifest_arg(p)?.entries {
            let f = load_image(&e.image).map_err(CliError::invalid)?;
            let l = load_labels(&e.labels, classes).map_err(CliError::invalid)?;
            rows.push((f, l, e.tier, e.trust));
        }
    }
    let name = paths
        .iter()
        .map(|p| p.file_stem().unwrap_or_default().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("+");
    Ok(LoadedSet { name, rows })
}

fn samples(set: &LoadedSet, tf: f64) -> Result<Vec<TrainSample>, CliError> {
    set.rows
        .iter()
        .map(|(f, l, tier, trust)| {
            TrainSample::new(f.clone(), l.clone(), *tier, trust.unwrap_or(tf)).map_err(CliError::invalid)
        })
        .collect()
}

fn load_eval(manifest: &Path, classes: usize) -> Result<Vec<(Frame, LabelMap)>, CliError> {
    let rows = load_set(&[manifest.to_path_buf()], classes)?.rows;
    Ok(rows.into_iter().map(|(f, l, _, _)| (f, l)).collect())
}

/// Trains, then writes the snapshot, log and a report computed from the
/// snapshot's own precision. Returns the report's mean IoU.
fn train_into(
    cfg: &RunConfig,
    data: &[TrainSample],
    val: &[(Frame, LabelMap)],
    palette: &Palette,
    out: &Path,
    exec: Exec,
) -> Result<f64, CliError> {
    let tc = &cfg.train;
    let model = TinySegModel::new(tc.shape(palette.len()), tc.init_seed).map_err(CliError::invalid)?;
    let outcome = train(model, data, val, tc, exec).map_err(CliError::runtime)?;
    save_snapshot(&out.join("model.bin"), &outcome.model).map_err(CliError::runtime)?;
    for (epoch, m) in &outcome.snapshots {
        save_snapshot(&out.join(format!("model_e{epoch:03}.bin")), m).map_err(CliError::runtime)?;
    }
    write_log(&out.join("train_log.csv"), &outcome.log).map_err(CliError::runtime)?;
    let conf = evaluate(&round_trip(&outcome.model), val, exec).map_err(CliError::runtime)?;
    write_report(&out.join("eval.csv"), &conf, palette).map_err(CliError::runtime)?;
    conf.mean_iou().map_err(CliError::runtime)
}

fn train_cmd(cfg: &RunConfig, sets: &[PathBuf], val: &Path, palette: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let palette = resolve_palette(palette, val)?;
    let set = load_set(sets, palette.len())?;
    let data = samples(&set, cfg.train.pgt_trust)?;
    let val = load_eval(val, palette.len())?;
    if val.is_empty() {
        return Err(CliError::Validation("empty evaluation manifest".into()));
    }
    let miou = train_into(cfg, &data, &val, &palette, out, Exec::default())?;
    println!("{}: {} samples, tf {}, val mean IoU {miou:.4}", set.name, data.len(), cfg.train.pgt_trust);
    Ok(())
}

fn eval(model: &Path, manifest: &Path, palette: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let model = load_snapshot(model).map_err(CliError::invalid)?;
    let palette = resolve_palette(palette, manifest)?;
    if palette.len() != model.num_classes() {
        return Err(CliError::Validation(format!(
            "class-count mismatch: model has {} classes, palette {}",
            model.num_classes(),
            palette.len()
        )));
    }
    let data = load_eval(manifest, palette.len())?;
    if data.is_empty() {
        return Err(CliError::Validation("empty evaluation: manifest lists no images".into()));
    }
    let conf = evaluate(&model, &data, Exec::default()).map_err(CliError::runtime)?;
    write_report(&out.join("eval.csv"), &conf, &palette).map_err(CliError::runtime)?;
    println!("mean IoU {:.6}", conf.mean_iou().map_err(CliError::runtime)?);
    Ok(())
}

fn sweep(cfg: &RunConfig, sets: &[PathBuf], val: &Path, palette: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let palette = resolve_palette(palette, val)?;
    let val = load_eval(val, palette.len())?;
    if val.is_empty() {
        return Err(CliError::Validation("empty evaluation manifest".into()));
    }
    let loaded: Vec<LoadedSet> = sets
        .iter()
        .map(|p| load_set(std::slice::from_ref(p), palette.len()))
        .collect::<Result<_, _>>()?;
    let sw = &cfg.sweep;
    let cells: Vec<(usize, f64, u64)> = (0..loaded.len())
        .flat_map(|s| sw.trust_factors.iter().flat_map(move |&tf| sw.seeds.iter().map(move |&seed| (s, tf, seed))))
        .collect();
    let (outer, inner) = if sw.parallel {
        (Exec::default(), Exec::Sequential)
    } else {
        (Exec::Sequential, Exec::default())
    };
    let results = outer.map_slice(&cells, |&(s, tf, seed)| -> Result<f64, CliError> {
        let set = &loaded[s];
        let dir = out.join(&set.name).join(format!("tf_{tf}")).join(format!("seed_{seed}"));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let mut c = cfg.clone();
        c.train.pgt_trust = tf;
        c.train.init_seed = seed;
        c.train.shuffle_seed = seed;
        c.sweep.seeds = vec![seed];
        c.sweep.trust_factors = vec![tf];
        c.write(&dir)?;
        train_into(&c, &samples(set, tf)?, &val, &palette, &dir, inner)
    });

    let cells_path = out.join("cells.csv");
    let mut log = csv_writer(&cells_path)?;
    let w = |e| CliError::io(&cells_path, e);
    writeln!(log, "set,tf,seed,val_miou,status").map_err(w)?;
    // (set, tf index) -> successful scores
    let mut grid: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut failed = 0;
    for (&(s, tf, seed), r) in cells.iter().zip(&results) {
        let ti = sw.trust_factors.iter().position(|&t| t == tf).expect("tf from the grid");
        match r {
            Ok(v) => {
                grid.entry((s, ti)).or_default().push(*v);
                writeln!(log, "{},{tf},{seed},{v:.6},ok", loaded[s].name).map_err(w)?;
            }
            Err(e) => {
                failed += 1;
                eprintln!("cell {} tf {tf} seed {seed}: {e}", loaded[s].name);
                let msg = e.to_string().replace([',', '\n'], ";");
                writeln!(log, "{},{tf},{seed},,failed: {msg}", loaded[s].name).map_err(w)?;
            }
        }
    }
    log.flush().map_err(w)?;

    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "failed".into());
    let agg_path = out.join("sweep.csv");
    let mut agg = csv_writer(&agg_path)?;
    let w = |e| CliError::io(&agg_path, e);
    let tf_cols: Vec<String> = sw.trust_factors.iter().map(|t| t.to_string()).collect();
    writeln!(agg, "set,{},avg", tf_cols.join(",")).map_err(w)?;
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); sw.trust_factors.len() + 1];
    for (s, set) in loaded.iter().enumerate() {
        let cellv: Vec<Option<f64>> = (0..sw.trust_factors.len())
            .map(|ti| grid.get(&(s, ti)).and_then(|v| mean(v)))
            .collect();
        let row_avg = mean(&cellv.iter().flatten().copied().collect::<Vec<_>>());
        for (ti, v) in cellv.iter().chain(std::iter::once(&row_avg)).enumerate() {
            if let Some(v) = v {
                columns[ti].push(*v);
            }
        }
        let cols: Vec<String> = cellv.iter().map(|v| fmt(*v)).collect();
        writeln!(agg, "{},{},{}", set.name, cols.join(","), fmt(row_avg)).map_err(w)?;
        println!("{}: {} avg {}", set.name, cols.join(" "), fmt(row_avg));
    }
    let avg_row: Vec<String> = columns.iter().map(|c| fmt(mean(c))).collect();
    writeln!(agg, "avg,{}", avg_row.join(",")).map_err(w)?;
    agg.flush().map_err(w)?;
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} of {} sweep cells failed", cells.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rating_scale() {
        assert_eq!(accuracy_rating(1.0), 9);
        assert_eq!(accuracy_rating(0.9), 1);
        assert_eq!(accuracy_rating(0.5), 1);
        assert_eq!(accuracy_rating(0.95), 5);
    }
}
