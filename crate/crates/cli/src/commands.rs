use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use pvmap::arch::{classifier_with, segmenter_with, NetworkSpec, CLASSIFIER_FC_WIDTHS, DECODER_WIDTHS, ENCODER_WIDTHS};
use pvmap::dataset::{
    extract, manifest, read_archive, split_validation, synth_scene, write_archive, ExtractConfig, LabelKind, Manifest,
    NegativeQuota, PatchSample, SynthConfig,
};
use pvmap::eval::{iou_sweep, max_f1, object_curve, pixel_pr, sweep_csv, SceneObjects, DEFAULT_SWEEP};
use pvmap::network::Network;
use pvmap::objects::{connected_components, extract_objects_at, from_jsonl, to_jsonl, DEFAULT_THRESHOLD};
use pvmap::par;
use pvmap::seed::stream_seed;
use pvmap::stitch::{plan_tiles, predict_map, BlendWindow, ProbabilityMap, DEFAULT_SIGMA, DEFAULT_STRIDE};
use pvmap::train::{train, Schedule, TrainConfig};

use crate::config::{List, Settings};
use crate::run::write_manifest;
use crate::scenes::{image_path, load_annotations, load_scenes};
use crate::{plot, Cli, Command, UsageError};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const NETWORK_FILE: &str = "network.txt";
pub const REPORT_FILE: &str = "train_report.csv";
pub const TRAIN_ARCHIVE: &str = "train.pvp";
pub const VAL_ARCHIVE: &str = "val.pvp";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleArg(pub Schedule);

impl FromStr for ScheduleArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "constant" => Ok(ScheduleArg(Schedule::Constant)),
            other => other
                .strip_prefix("halve:")
                .and_then(|n| n.parse().ok())
                .filter(|&n: &usize| n > 0)
                .map(|n| ScheduleArg(Schedule::HalveEvery(n)))
                .ok_or_else(|| format!("expected `constant` or `halve:N`, got {other:?}")),
        }
    }
}

impl crate::config::Value for ScheduleArg {
    fn echo(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ScheduleArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Schedule::Constant => f.write_str("constant"),
            Schedule::HalveEvery(n) => write!(f, "halve:{n}"),
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => synth(&settings, a),
        Command::Extract(a) => extract_cmd(&settings, a),
        Command::Train(a) => train_cmd(&settings, a),
        Command::Predict(a) => predict(&settings, a),
        Command::Detect(a) => detect(&settings, a),
        Command::Score(a) => score(&settings, a),
        Command::Sweep(a) => sweep(&settings, a),
        Command::Report(a) => report(&settings, a),
    }
}

fn out_dir(settings: &Settings, flag: Option<PathBuf>) -> Result<PathBuf> {
    let dir: PathBuf = settings.require("out", flag)?;
    fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn synth(s: &Settings, a: crate::SynthArgs) -> Result<()> {
    let defaults = SynthConfig::default();
    let seed = s.get("seed", a.seed, 0)?;
    let count = s.get("scenes", a.scenes, 10)?;
    let panels = s.get("panels", a.panels, 5)?;
    let width = s.get("width", a.width, 256)?;
    let height = s.get("height", a.height, 256)?;
    let prefix = s.get("prefix", a.prefix, "scene_".to_string())?;
    let cfg = SynthConfig {
        min_side: s.get("min_side", a.min_side, defaults.min_side)?,
        max_side: s.get("max_side", a.max_side, defaults.max_side)?,
        distractors: s.get("distractors", a.distractors, defaults.distractors)?,
        resolution_m: s.get("resolution", a.resolution, defaults.resolution_m)?,
        ..defaults
    };
    let out = out_dir(s, a.out)?;
    let echo = s.finish()?;

    let made = par::map_range(count, |i| {
        let id = format!("{prefix}{i:03}");
        synth_scene(&id, stream_seed(seed, i as u64), width, height, panels, &cfg)
    });
    let mut total = 0;
    for scene in made {
        let (raster, annotations) = scene?;
        raster.save_png(&image_path(&out, &raster.id))?;
        annotations.save(&out.join(format!("{}.json", raster.id)))?;
        pvmap::dataset::rasterize(&annotations)?.save_png(&out.join(format!("{}_mask.png", raster.id)))?;
        total += annotations.polygons.len();
    }
    write_manifest(&out, "synth", &echo, &[])?;
    println!("wrote {count} scenes with {total} annotations to {}", out.display());
    Ok(())
}

fn parse_label(s: &str) -> Result<LabelKind> {
    match s {
        "class" => Ok(LabelKind::Class),
        "mask" => Ok(LabelKind::Mask),
        other => Err(UsageError(format!("label must be `class` or `mask`, got {other:?}")).into()),
    }
}

fn extract_cmd(s: &Settings, a: crate::ExtractArgs) -> Result<()> {
    let dir: PathBuf = s.require("scenes", a.scenes)?;
    let label = parse_label(&s.get("label", a.label, "mask".to_string())?)?;
    let seed = s.get("seed", a.seed, 0)?;
    let share = s.get("negative_share", a.negative_share, 0.75)?;
    let cfg = ExtractConfig {
        label,
        negatives: NegativeQuota::ClassMix(share),
        positive_retention: s.get("retention", a.retention, pvmap::dataset::POSITIVE_RETENTION)?,
        copies: s.get("copies", a.copies, pvmap::dataset::POSITIVE_COPIES)?,
    };
    let val_fraction = s.get("val_fraction", a.val_fraction, 0.1)?;
    let out = out_dir(s, a.out)?;
    let echo = s.finish()?;

    let (scenes, inputs) = load_scenes(&dir)?;
    let pairs: Vec<_> = scenes.into_iter().map(|sc| (sc.raster, sc.mask)).collect();
    let (train_scenes, val_scenes) = split_validation(&pairs, val_fraction, stream_seed(seed, 0))?;
    let train_set = extract(&train_scenes, &cfg, stream_seed(seed, 1))?;
    let val_set = if val_scenes.is_empty() {
        Vec::new()
    } else {
        extract(&val_scenes, &cfg, stream_seed(seed, 2))?
    };
    for (name, set) in [(TRAIN_ARCHIVE, &train_set), (VAL_ARCHIVE, &val_set)] {
        let mut buf = Vec::new();
        write_archive(&mut buf, set)?;
        write(&out.join(name), buf)?;
    }
    write_manifest(&out, "extract", &echo, &inputs)?;
    let pos = |v: &[PatchSample]| v.iter().filter(|p| p.is_positive()).count();
    println!(
        "train: {} rasters, {} patches ({} positive); val: {} rasters, {} patches ({} positive)",
        train_scenes.len(),
        train_set.len(),
        pos(&train_set),
        val_scenes.len(),
        val_set.len(),
        pos(&val_set)
    );
    Ok(())
}

fn read_patches(path: &Path) -> Result<Vec<PatchSample>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    read_archive(&mut bytes.as_slice()).with_context(|| format!("reading {}", path.display()))
}

fn train_cmd(s: &Settings, a: crate::TrainArgs) -> Result<()> {
    let data: PathBuf = s.require("data", a.data)?;
    let arch = s.get("arch", a.arch, "segmenter".to_string())?;
    let encoder = s.get("encoder", a.encoder, List(ENCODER_WIDTHS.to_vec()))?.0;
    let (spec, base) = match arch.as_str() {
        "segmenter" => {
            let decoder = s.get("decoder", a.decoder, List(DECODER_WIDTHS.to_vec()))?.0;
            (segmenter_with(&encoder, &decoder), TrainConfig::segmenter())
        }
        "classifier" => {
            let fc = s.get("fc", a.fc, List(CLASSIFIER_FC_WIDTHS.to_vec()))?.0;
            (classifier_with(&encoder, &fc), TrainConfig::classifier())
        }
        other => return Err(UsageError(format!("arch must be `classifier` or `segmenter`, got {other:?}")).into()),
    };
    let spec = spec.map_err(|e| UsageError(e.to_string()))?;
    let config = TrainConfig {
        batch_size: s.get("batch_size", a.batch_size, base.batch_size)?,
        learning_rate: s.get("learning_rate", a.learning_rate, base.learning_rate)?,
        momentum: s.get("momentum", a.momentum, base.momentum)?,
        weight_decay: s.get("weight_decay", a.weight_decay, base.weight_decay)?,
        epochs: s.get("epochs", a.epochs, base.epochs)?,
        schedule: s.get("schedule", a.schedule, ScheduleArg(base.schedule))?.0,
        seed: s.get("seed", a.seed, 0)?,
    };
    let out = out_dir(s, a.out)?;
    let echo = s.finish()?;

    let train_path = data.join(TRAIN_ARCHIVE);
    let val_path = data.join(VAL_ARCHIVE);
    let train_set = read_patches(&train_path)?;
    let val_set = if val_path.exists() {
        read_patches(&val_path)?
    } else {
        Vec::new()
    };
    eprintln!(
        "training {arch} ({} parameters) on {} patches, validating on {}",
        Network::<f32>::new(&spec, pvmap::network::Init::Zeros).param_count(),
        train_set.len(),
        val_set.len()
    );
    let (net, report) = train(&spec, &train_set, &val_set, &config, |e| {
        let val = e.val_loss.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into());
        eprintln!(
            "epoch {:>3}  lr {:.2e}  train {:.5}  val {val}",
            e.epoch, e.learning_rate, e.train_loss
        );
    })?;
    net.save_weights(&out.join(WEIGHTS_FILE))?;
    write(&out.join(NETWORK_FILE), spec.to_manifest())?;
    write(&out.join(REPORT_FILE), report.to_csv())?;
    let mut inputs = vec![train_path];
    if val_path.exists() {
        inputs.push(val_path);
    }
    write_manifest(&out, "train", &echo, &inputs)?;
    Ok(())
}

fn load_model(dir: &Path) -> Result<Network<f32>> {
    let manifest_path = dir.join(NETWORK_FILE);
    let text = fs::read_to_string(&manifest_path).with_context(|| format!("reading {}", manifest_path.display()))?;
    let spec = NetworkSpec::from_manifest(&text).with_context(|| format!("parsing {}", manifest_path.display()))?;
    let weights = dir.join(WEIGHTS_FILE);
    Network::load_weights(&spec, &weights).with_context(|| format!("loading {}", weights.display()))
}

fn predict(s: &Settings, a: crate::PredictArgs) -> Result<()> {
    let model: PathBuf = s.require("model", a.model)?;
    let dir: PathBuf = s.require("scenes", a.scenes)?;
    let stride = s.get("stride", a.stride, DEFAULT_STRIDE)?;
    let sigma = s.get("sigma", a.sigma, DEFAULT_SIGMA)?;
    let out = out_dir(s, a.out)?;
    let echo = s.finish()?;

    let net = load_model(&model)?;
    let window = BlendWindow::gaussian(sigma).map_err(|e| UsageError(e.to_string()))?;
    let (scenes, mut inputs) = load_scenes(&dir)?;
    for sc in &scenes {
        let plan = plan_tiles(sc.raster.width, sc.raster.height, stride)?;
        let map = predict_map(&net, &sc.raster, &plan, &window)?;
        map.save(&out.join(format!("{}.pmap", sc.raster.id)))?;
        map.save_png16(&out.join(format!("{}.png", sc.raster.id)))?;
    }
    inputs.push(model.join(NETWORK_FILE));
    inputs.push(model.join(WEIGHTS_FILE));
    write_manifest(&out, "predict", &echo, &inputs)?;
    println!("wrote {} probability maps to {}", scenes.len(), out.display());
    Ok(())
}

/// Files in `dir` with extension `ext`, sorted, keyed by file stem.
fn files_with(dir: &Path, ext: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == ext) {
            let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
            out.push((stem, p));
        }
    }
    out.sort();
    Ok(out)
}

fn detect(s: &Settings, a: crate::DetectArgs) -> Result<()> {
    let maps: PathBuf = s.require("maps", a.maps)?;
    let threshold = s.get("threshold", a.threshold, DEFAULT_THRESHOLD)?;
    let out = out_dir(s, a.out)?;
    let echo = s.finish()?;

    let files = files_with(&maps, "pmap")?;
    if files.is_empty() {
        bail!("no .pmap files in {}", maps.display());
    }
    let mut total = 0;
    for (id, path) in &files {
        let map = ProbabilityMap::load(path).with_context(|| format!("loading {}", path.display()))?;
        let objects = extract_objects_at(&map, threshold);
        total += objects.len();
        write(&out.join(format!("{id}.jsonl")), to_jsonl(&objects))?;
    }
    let inputs: Vec<PathBuf> = files.into_iter().map(|(_, p)| p).collect();
    write_manifest(&out, "detect", &echo, &inputs)?;
    println!("{total} detections in {} maps", inputs.len());
    Ok(())
}

/// Detections and 8-connected truth components, one entry per scene.
fn scene_objects(scenes_dir: &Path, detections: &Path) -> Result<(Vec<SceneObjects>, Vec<PathBuf>)> {
    let (scenes, mut inputs) = load_scenes(scenes_dir)?;
    let mut out = Vec::new();
    for sc in &scenes {
        let path = detections.join(format!("{}.jsonl", sc.raster.id));
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let dets = from_jsonl(&text).with_context(|| format!("parsing {}", path.display()))?;
        out.push(SceneObjects {
            detections: dets,
            truths: connected_components(&sc.mask),
        });
        inputs.push(path);
    }
    Ok((out, inputs))
}

fn score(s: &Settings, a: crate::ScoreArgs) -> Result<()> {
    let scenes_dir: PathBuf = s.require("scenes", a.scenes)?;
    let mode = s.get("mode", a.mode, "both".to_string())?;
    let (pixel, object) = match mode.as_str() {
        "pixel" => (true, false),
        "object" => (false, true),
        "both" => (true, true),
        other => return Err(UsageError(format!("mode must be pixel, object or both, got {other:?}")).into()),
    };
    let maps: Option<PathBuf> = if pixel { Some(s.require("maps", a.maps)?) } else { None };
    let dets: Option<PathBuf> = if object {
        Some(s.require("detections", a.detections)?)
    } else {
        None
    };
    let ious = s.get("iou", a.iou, List(vec![0.5]))?.0;
    let out = out_dir(s, a.out)?;
    let echo = s.finish()?;

    let mut summary = String::from("mode,iou,max_f1,n_truth,n_detections\n");
    let mut inputs = Vec::new();
    let mut curves = Vec::new();
    if let Some(maps) = maps {
        let (scenes, files) = load_scenes(&scenes_dir)?;
        inputs.extend(files);
        let mut loaded = Vec::new();
        for sc in &scenes {
            let path = maps.join(format!("{}.pmap", sc.raster.id));
            let map = ProbabilityMap::load(&path).with_context(|| format!("loading {}", path.display()))?;
            if (map.width, map.height) != (sc.mask.width, sc.mask.height) {
                bail!("{}: map size does not match scene {}", path.display(), sc.raster.id);
            }
            inputs.push(path);
            loaded.push(map);
        }
        let pairs: Vec<_> = loaded.iter().zip(scenes.iter().map(|sc| &sc.mask)).collect();
        let curve = pixel_pr(&pairs)?;
        write(&out.join("pixel_pr.csv"), curve.to_csv())?;
        let f1 = max_f1(&curve);
        summary += &format!("pixel,,{f1},{},{}\n", curve.n_truth, curve.n_detections);
        println!("pixel max F1 {f1:.4}");
        curves.push(("pixel".to_string(), curve));
    }
    if let Some(dets) = dets {
        let (scenes, files) = scene_objects(&scenes_dir, &dets)?;
        if inputs.is_empty() {
            inputs.extend(files);
        } else {
            inputs.extend(
                files
                    .into_iter()
                    .filter(|p| p.extension().is_some_and(|x| x == "jsonl")),
            );
        }
        for &t in &ious {
            let curve = object_curve(&scenes, t)?;
            write(&out.join(format!("object_pr_iou{t:.2}.csv")), curve.to_csv())?;
            let f1 = max_f1(&curve);
            summary += &format!("object,{t},{f1},{},{}\n", curve.n_truth, curve.n_detections);
            println!("object max F1 at IoU {t}: {f1:.4}");
            curves.push((format!("object IoU {t}"), curve));
        }
    }
    write(&out.join("summary.csv"), &summary)?;
    if a.plot {
        let series: Vec<(&str, Vec<(f64, f64)>)> = curves
            .iter()
            .map(|(n, c)| (n.as_str(), c.points.iter().map(|p| (p.recall, p.precision)).collect()))
            .collect();
        write(
            &out.join("pr.svg"),
            plot::line_chart("Precision-recall", "recall", "precision", &series),
        )?;
    }
    write_manifest(&out, "score", &echo, &inputs)?;
    Ok(())
}

fn sweep(s: &Settings, a: crate::SweepArgs) -> Result<()> {
    let scenes_dir: PathBuf = s.require("scenes", a.scenes)?;
    let dets: PathBuf = s.require("detections", a.detections)?;
    let thresholds = s.get("thresholds", a.thresholds, List(DEFAULT_SWEEP.to_vec()))?.0;
    let out = out_dir(s, a.out)?;
    let echo = s.finish()?;

    let (scenes, inputs) = scene_objects(&scenes_dir, &dets)?;
    let rows = iou_sweep(&scenes, &thresholds).map_err(|e| UsageError(e.to_string()))?;
    write(&out.join("iou_sweep.csv"), sweep_csv(&rows))?;
    if a.plot {
        let series = [("max F1", rows.clone())];
        write(
            &out.join("iou_sweep.svg"),
            plot::line_chart("Max F1 against IoU threshold", "IoU threshold", "max F1", &series),
        )?;
    }
    write_manifest(&out, "sweep", &echo, &inputs)?;
    for (t, f) in rows {
        println!("IoU {t:.2}: max F1 {f:.4}");
    }
    Ok(())
}

fn report(s: &Settings, a: crate::ReportArgs) -> Result<()> {
    let out = match s.get_opt("out", a.out)? {
        Some(dir) => {
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            Some(dir)
        }
        None => None,
    };
    let echo = s.finish()?;
    let mut csv = format!("{}\n", Manifest::CSV_HEADER);
    let mut inputs = Vec::new();
    for spec in &a.splits {
        let Some((name, dir)) = spec.split_once('=') else {
            return Err(UsageError(format!("--split expects name=DIR, got {spec:?}")).into());
        };
        let sets = load_annotations(Path::new(dir))?;
        let m = manifest(name, &sets.iter().map(|(_, s)| s.clone()).collect::<Vec<_>>());
        csv += &m.csv_row();
        csv.push('\n');
        inputs.extend(sets.into_iter().map(|(p, _)| p));
    }
    print!("{csv}");
    if let Some(dir) = out {
        write(&dir.join("manifest.csv"), &csv)?;
        let mut echo = echo;
        echo.insert("split".into(), a.splits.join(" "));
        write_manifest(&dir, "report", &echo, &inputs)?;
    }
    Ok(())
}
