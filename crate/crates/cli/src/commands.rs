use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use gaitfuse_core::attribution::{
    aggregate_regions, attribution_csv, grad_cam_keypoints, mean_scores, occlusion_importance, rank_correlation,
    AttributionMap, RegionTable,
};
use gaitfuse_core::checkpoint::{Checkpoint, RngState};
use gaitfuse_core::config::{CamTarget, RunConfig};
use gaitfuse_core::features::{extract_with, write_feature_csv, FeatureRow};
use gaitfuse_core::metrics::{roc_curve, EvalReport};
use gaitfuse_core::model::{Model, Prediction};
use gaitfuse_core::pose::{
    patient_stratified_split, quality_filter, slide_windows, synth_generate, write_pose_jsonl, PoseRecord,
    COCO_NAMES, NUM_CLASSES,
};
use gaitfuse_core::train::{train, LabeledSet, PreparedSplit};
use gaitfuse_core::Error;
use serde::{Deserialize, Serialize};

use crate::args::{Command, Common, SplitPart};
use crate::config::{resolve, write_resolved, RESOLVED_CONFIG};
use crate::data::{load_sequences, WindowRecord};

pub fn run(cmd: Command) -> Result<()> {
    let common = cmd.common().clone();
    match cmd {
        Command::Convert { input, .. } => convert(&input, &common),
        Command::Window { input, .. } => window(&input, &common),
        Command::Features { input, .. } => features(&input, &common),
        Command::Train { input, .. } => train_cmd(&input, &common),
        Command::Eval {
            input,
            checkpoint,
            split,
            ..
        } => eval(&input, &checkpoint, split, &common),
        Command::Attribute {
            input,
            checkpoint,
            clips,
            target,
            ..
        } => attribute(&input, &checkpoint, clips, target.map(Into::into), &common),
        Command::Synth { clips_per_class, .. } => synth(clips_per_class, &common),
        Command::Report { evals, .. } => report(&evals, &common),
    }
}

fn convert(input: &Path, common: &Common) -> Result<()> {
    let cfg = resolve(common, RunConfig::default())?;
    let (seqs, _, stats) = load_sequences(input, cfg.fps)?;
    write_resolved(&cfg, &common.out)?;
    let records: Vec<PoseRecord> = seqs.iter().map(|s| PoseRecord::from_sequence(s, None)).collect();
    write_pose_jsonl(&common.out.join("poses.jsonl"), &records)?;
    println!(
        "converted {} records ({} BODY25 -> COCO17, {} normalized)",
        stats.records, stats.converted, stats.normalized
    );
    Ok(())
}

fn window(input: &Path, common: &Common) -> Result<()> {
    let cfg = resolve(common, RunConfig::default())?;
    let (seqs, _, _) = load_sequences(input, cfg.fps)?;
    write_resolved(&cfg, &common.out)?;
    let (mut kept, mut rejected) = (Vec::new(), 0);
    for seq in &seqs {
        for w in slide_windows(seq, cfg.split.window, cfg.split.stride)? {
            if !quality_filter(&w, cfg.split.min_conf, cfg.split.min_frac) {
                rejected += 1;
                continue;
            }
            kept.push(WindowRecord {
                patient_id: w.patient_id.clone(),
                video_id: w.video_id.clone(),
                gmfcs: w.label,
                fps: w.fps,
                start_frame: w.start_frame,
                frames: w.x.chunks(COCO_NAMES.len()).map(<[_]>::to_vec).collect(),
            });
        }
    }
    let mut buf = Vec::new();
    for rec in &kept {
        serde_json::to_writer(&mut buf, rec)?;
        buf.push(b'\n');
    }
    fs::write(common.out.join("windows.jsonl"), buf)?;
    println!("{} sequences -> {} windows kept, {rejected} rejected by the quality filter", seqs.len(), kept.len());
    Ok(())
}

fn features(input: &Path, common: &Common) -> Result<()> {
    let cfg = resolve(common, RunConfig::default())?;
    let (seqs, _, _) = load_sequences(input, cfg.fps)?;
    write_resolved(&cfg, &common.out)?;
    let mut rows = Vec::new();
    for seq in &seqs {
        for w in slide_windows(seq, cfg.split.window, cfg.split.stride)? {
            if !quality_filter(&w, cfg.split.min_conf, cfg.split.min_frac) {
                continue;
            }
            rows.push(FeatureRow {
                features: extract_with(&w, &cfg.features)?.features,
                patient_id: w.patient_id,
                video_id: w.video_id,
                start_frame: w.start_frame,
                label: w.label,
            });
        }
    }
    write_feature_csv(&common.out.join("features.csv"), &rows)?;
    let complete = rows.iter().filter(|r| r.features.all_valid()).count();
    println!("{} windows, {complete} with all 24 features valid", rows.len());
    Ok(())
}

fn prepare(input: &Path, cfg: &RunConfig) -> Result<PreparedSplit> {
    let (seqs, _, _) = load_sequences(input, cfg.fps)?;
    let split = patient_stratified_split(&seqs, &cfg.split, cfg.seed())?;
    for w in &split.warnings {
        log::warn!("{w}");
    }
    Ok(PreparedSplit::new(&split, &cfg.features)?)
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    best_epoch: usize,
    early_stopped: bool,
    best_val_acc: f64,
    train_clips: usize,
    val_clips: usize,
    test_clips: usize,
}

fn train_cmd(input: &Path, common: &Common) -> Result<()> {
    let cfg = resolve(common, RunConfig::default())?;
    let data = prepare(input, &cfg)?;
    write_resolved(&cfg, &common.out)?;
    let model = Model::new(cfg.model.clone(), cfg.seed())?;
    let out = train(model, &data, &cfg.train)?;
    out.log.write_csv(&common.out.join("run_log.csv"))?;
    let best_val_acc = out.log.epochs.iter().map(|e| e.val_acc).fold(f64::MIN, f64::max);
    let summary = TrainSummary {
        epochs: out.log.epochs.len(),
        best_epoch: out.log.best_epoch,
        early_stopped: out.log.early_stopped,
        best_val_acc,
        train_clips: data.train.len(),
        val_clips: data.val.len(),
        test_clips: data.test.len(),
    };
    fs::write(common.out.join("train_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    let ckpt = Checkpoint {
        classifier: out.best,
        optimizer: Some(out.optimizer),
        run_config: serde_json::to_value(&cfg)?,
        rng: RngState {
            seed: cfg.seed(),
            epochs_completed: out.log.epochs.len(),
        },
    };
    ckpt.save(&common.out.join("model.ckpt"))?;
    println!(
        "trained {} epochs on {} clips; best epoch {} (val acc {:.4})",
        summary.epochs, summary.train_clips, summary.best_epoch, best_val_acc
    );
    Ok(())
}

/// Load a checkpoint and resolve the run config on top of the one it was
/// trained with. Anything that contradicts the stored model is an
/// incompatible checkpoint.
fn load_checkpoint(path: &Path, common: &Common) -> Result<(Checkpoint, RunConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let stored: RunConfig = serde_json::from_value(ckpt.run_config.clone()).unwrap_or_else(|_| RunConfig {
        model: ckpt.classifier.model.config.clone(),
        features: ckpt.classifier.feature_config.clone(),
        ..Default::default()
    });
    let cfg = resolve(common, stored)?;
    let have = &ckpt.classifier.model.config;
    if common.sets_model() && cfg.model != *have {
        let diff = |what: &str, want: String, got: String| {
            (want != got).then(|| format!("{what}: requested {want}, checkpoint has {got}"))
        };
        let reasons: Vec<String> = [
            diff("feature set", format!("{:?}", cfg.model.features), format!("{:?}", have.features)),
            diff("fusion", format!("{:?}", cfg.model.fusion), format!("{:?}", have.fusion)),
            diff("preset", format!("{:?}", cfg.model.preset), format!("{:?}", have.preset)),
            diff("variant", format!("{:?}", cfg.model.variant), format!("{:?}", have.variant)),
        ]
        .into_iter()
        .flatten()
        .collect();
        let reasons = if reasons.is_empty() { "model settings differ".to_string() } else { reasons.join("; ") };
        return Err(Error::Checkpoint(format!("{} is incompatible: {reasons}", path.display())).into());
    }
    if cfg.features != ckpt.classifier.feature_config {
        return Err(Error::Checkpoint(format!(
            "{} was trained with a different feature extractor configuration",
            path.display()
        ))
        .into());
    }
    Ok((ckpt, cfg))
}

fn pick(data: &PreparedSplit, part: SplitPart) -> &LabeledSet {
    match part {
        SplitPart::Train => &data.train,
        SplitPart::Val => &data.val,
        SplitPart::Test => &data.test,
    }
}

fn eval(input: &Path, checkpoint: &Path, part: SplitPart, common: &Common) -> Result<()> {
    let (ckpt, cfg) = load_checkpoint(checkpoint, common)?;
    let data = prepare(input, &cfg)?;
    let set = pick(&data, part);
    if set.is_empty() {
        bail!(Error::Validation(format!("the {part:?} split is empty")));
    }
    write_resolved(&cfg, &common.out)?;
    let (report, preds) = ckpt.classifier.evaluate(set)?;
    write_eval_outputs(&common.out, &report, set, &preds)?;

    println!("samples        {}", report.num_samples);
    println!("accuracy       {:.4}", report.accuracy);
    println!("weighted F1    {:.4}", report.weighted_f1);
    println!("linear kappa   {:.4}", report.kappa_linear);
    for (c, r) in report.recall.iter().enumerate() {
        let r = r.map_or("n/a".to_string(), |r| format!("{r:.4}"));
        println!("recall level {} {r}", c + 1);
    }
    Ok(())
}

fn write_eval_outputs(out: &Path, report: &EvalReport, set: &LabeledSet, preds: &[Prediction]) -> Result<()> {
    fs::write(out.join("eval_report.json"), serde_json::to_string_pretty(report)?)?;

    let k = report.confusion.len();
    let mut cm = String::from("truth");
    for j in 0..k {
        write!(cm, ",pred_{}", j + 1)?;
    }
    cm.push('\n');
    for (i, row) in report.confusion.iter().enumerate() {
        write!(cm, "{}", i + 1)?;
        for n in row {
            write!(cm, ",{n}")?;
        }
        cm.push('\n');
    }
    fs::write(out.join("confusion.csv"), cm)?;

    let mut w = csv::Writer::from_path(out.join("predictions.csv"))?;
    let mut header = vec!["patient_id".to_string(), "video_id".into(), "start_frame".into(), "truth".into(), "pred".into()];
    header.extend((1..=k).map(|c| format!("p{c}")));
    w.write_record(&header)?;
    for (clip, p) in set.clips.iter().zip(preds) {
        let mut rec = vec![
            clip.patient_id.clone(),
            clip.video_id.clone(),
            clip.start_frame.to_string(),
            clip.label.to_string(),
            (p.class + 1).to_string(),
        ];
        rec.extend(p.probs.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
    write_roc(out, &probs, &set.labels())
}

fn write_roc(out: &Path, probs: &[Vec<f64>], truth: &[usize]) -> Result<()> {
    for c in 0..probs.first().map_or(0, Vec::len) {
        let mut w = csv::Writer::from_path(out.join(format!("roc_level{}.csv", c + 1)))?;
        w.write_record(["threshold", "tpr", "fpr"])?;
        for p in roc_curve(probs, truth, c)? {
            w.write_record([format!("{:?}", p.threshold), format!("{:?}", p.tpr), format!("{:?}", p.fpr)])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn attribute(
    input: &Path,
    checkpoint: &Path,
    count: usize,
    target: Option<CamTarget>,
    common: &Common,
) -> Result<()> {
    let (ckpt, mut cfg) = load_checkpoint(checkpoint, common)?;
    if let Some(t) = target {
        cfg.attribution.target = t;
    }
    if !cfg.model.variant.uses_skeleton() {
        bail!(Error::Checkpoint(format!(
            "{} has no skeleton stream to attribute",
            checkpoint.display()
        )));
    }
    let data = prepare(input, &cfg)?;
    let set = &data.test;
    if set.is_empty() || count == 0 {
        bail!(Error::Validation("no test clips to attribute".into()));
    }
    write_resolved(&cfg, &common.out)?;
    let dir = common.out.join("clips");
    fs::create_dir_all(&dir)?;

    let clf = &ckpt.classifier;
    let n = count.min(set.len());
    let table = RegionTable::default();
    let (mut cams, mut occs, mut rhos) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        let idx = i * set.len() / n;
        let (clip, feats) = (&set.clips[idx], &set.features[idx]);
        let target = match cfg.attribution.target {
            CamTarget::Predicted => None,
            CamTarget::True => Some(clip.class()),
        };
        let cam = grad_cam_keypoints(clf, clip, feats, target, cfg.attribution.time_aggregation)?;
        let occ_scores = occlusion_importance(clf, clip, feats, cam.target_class)?;
        let occ = AttributionMap {
            scores: occ_scores,
            regions: aggregate_regions(&occ_scores, &table),
            ..cam.clone()
        };
        let stem = format!("{}_{}", cam.video_id, cam.start_frame);
        fs::write(dir.join(format!("{stem}_gradcam.csv")), attribution_csv(&cam, &table))?;
        fs::write(dir.join(format!("{stem}_occlusion.csv")), attribution_csv(&occ, &table))?;
        rhos.push(rank_correlation(&cam.scores, &occ.scores)?);
        cams.push(cam.scores);
        occs.push(occ.scores);
    }
    let (mc, mo) = (mean_scores(&cams), mean_scores(&occs));
    let mut w = csv::Writer::from_path(common.out.join("attribution_mean.csv"))?;
    w.write_record(["keypoint", "gradcam", "occlusion", "region"])?;
    for k in 0..COCO_NAMES.len() {
        let region = table.region_of(k).map_or("", |r| r.name());
        w.write_record([COCO_NAMES[k], &format!("{:?}", mc[k]), &format!("{:?}", mo[k]), region])?;
    }
    w.flush()?;
    let rho = rhos.iter().sum::<f64>() / rhos.len() as f64;
    println!("{n} clips attributed; mean Spearman rho (Grad-CAM vs occlusion) {rho:.3}");
    Ok(())
}

fn synth(clips_per_class: Option<usize>, common: &Common) -> Result<()> {
    let mut base = RunConfig::default();
    if let Some(n) = clips_per_class {
        base.synth.clips_per_class = n;
    }
    let mut cfg = resolve(common, base)?;
    if let Some(n) = clips_per_class {
        cfg.synth.clips_per_class = n;
        cfg.validate()?;
    }
    write_resolved(&cfg, &common.out)?;
    let clips = synth_generate(&cfg.synth, cfg.seed())?;
    let records: Vec<PoseRecord> = clips
        .iter()
        .map(|c| PoseRecord::from_sequence(&c.sequence, Some(c.truth.clone())))
        .collect();
    write_pose_jsonl(&common.out.join("synthetic.jsonl"), &records)?;
    println!("{} sequences written ({} per class)", records.len(), cfg.synth.clips_per_class);
    Ok(())
}

#[derive(Deserialize)]
struct PredictionRow {
    truth: usize,
}

fn report(evals: &[PathBuf], common: &Common) -> Result<()> {
    let cfg = resolve(common, RunConfig::default())?;
    let mut rows = Vec::new();
    let mut loaded = Vec::new();
    for dir in evals {
        let path = dir.join("eval_report.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let rep: EvalReport = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let probs = read_probs(&dir.join("predictions.csv"))?;
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let label = config_label(dir).unwrap_or_default();
        loaded.push((name, label, rep, probs));
    }
    write_resolved(&cfg, &common.out)?;
    for (name, label, rep, (probs, truth)) in &loaded {
        let mut w = csv::Writer::from_path(common.out.join(format!("confusion_pct_{name}.csv")))?;
        let mut header = vec!["truth".to_string()];
        header.extend((1..=rep.confusion.len()).map(|j| format!("pred_{j}")));
        w.write_record(&header)?;
        for (i, row) in rep.confusion.iter().enumerate() {
            let total: u64 = row.iter().sum();
            let mut rec = vec![(i + 1).to_string()];
            rec.extend(row.iter().map(|&n| {
                if total == 0 {
                    String::new()
                } else {
                    format!("{:.2}", 100.0 * n as f64 / total as f64)
                }
            }));
            w.write_record(&rec)?;
        }
        w.flush()?;
        let roc_dir = common.out.join(format!("roc_{name}"));
        fs::create_dir_all(&roc_dir)?;
        write_roc(&roc_dir, probs, truth)?;
        rows.push(format!(
            "{:<24} {:<28} {:>7} {:>8.4} {:>8.4} {:>8.4}",
            name, label, rep.num_samples, rep.accuracy, rep.weighted_f1, rep.kappa_linear
        ));
    }
    let mut table = format!(
        "{:<24} {:<28} {:>7} {:>8} {:>8} {:>8}\n",
        "run", "configuration", "clips", "Acc", "F1_w", "kappa_l"
    );
    for r in &rows {
        table.push_str(r);
        table.push('\n');
    }
    fs::write(common.out.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}

/// Zero-based truth and class probabilities from a predictions CSV.
fn read_probs(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let bad = |m: String| Error::Validation(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    let cols: Vec<usize> = (1..=NUM_CLASSES)
        .filter_map(|c| header.iter().position(|h| h == format!("p{c}")))
        .collect();
    let (mut probs, mut truth) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let row: PredictionRow = rec.deserialize(Some(&header)).map_err(|e| bad(e.to_string()))?;
        if row.truth == 0 {
            return Err(bad("levels are 1-based".into()).into());
        }
        truth.push(row.truth - 1);
        let p = cols
            .iter()
            .map(|&j| rec[j].parse::<f64>().map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        probs.push(p);
    }
    Ok((probs, truth))
}

fn config_label(dir: &Path) -> Option<String> {
    let text = fs::read_to_string(dir.join(RESOLVED_CONFIG)).ok()?;
    let cfg: RunConfig = toml::from_str(&text).ok()?;
    let v = serde_json::to_value(&cfg.model).ok()?;
    Some(format!(
        "{}/{}/{}/{}",
        v["variant"].as_str()?,
        v["fusion"].as_str()?,
        v["features"].as_str()?,
        v["preset"].as_str()?
    ))
}
