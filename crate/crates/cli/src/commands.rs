//! The six subcommand implementations. Each writes its artifacts plus a
//! `run.json` provenance record and never mutates its inputs.

use std::path::{Path, PathBuf};

use mtnet_core::data::{
    build_training_set, decode_ground_truth, read_boxes_csv, read_manifest, read_pgm, read_ppm,
    synth_scene, write_boxes_csv, write_manifest, write_ppm, SceneSpec,
};
use mtnet_core::detection::{
    argmax_map, connected_components, filter_and_boxes, net_to_code_order, suppress_boundary,
    threshold_map, DetectMode, SegmentationMap,
};
use mtnet_core::eval::{aggregate, match_detections, pixel_metrics, write_metrics_csv, MetricRow};
use mtnet_core::network::{init_params, ArchId, Model, NetworkSpec};
use mtnet_core::training::{train, TrainConfig};
use mtnet_core::{Error, GrayImage, Result, Tensor3, Tensor4};

use crate::config::RunRecord;

/// `params`: print the trainable-parameter count of one architecture.
pub fn run_params(arch: &str, classes: u8) -> Result<()> {
    let arch = parse_arch(arch)?;
    let spec = NetworkSpec::build(arch, classes)?;
    println!("{}", spec.count_params());
    Ok(())
}

fn parse_arch(s: &str) -> Result<ArchId> {
    ArchId::parse(s).ok_or_else(|| {
        Error::invalid(
            "params",
            format!("unknown architecture {s:?}; use arch1, arch2, arch3, or mango_tree_net"),
        )
    })
}

pub struct SynthSettings {
    pub out: PathBuf,
    pub scenes: usize,
    pub height: usize,
    pub width: usize,
    pub crowns: usize,
    pub overlap_pairs: usize,
    pub distractors: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub seed: u64,
}

/// `synth`: generate a dataset directory of scene/ground-truth PPM pairs,
/// with a manifest and an annotation-box CSV.
pub fn run_synth(s: &SynthSettings) -> Result<()> {
    std::fs::create_dir_all(&s.out).map_err(|e| Error::io(&s.out, e))?;
    let mut manifest = Vec::new();
    let mut all_boxes = Vec::new();
    for i in 0..s.scenes {
        let spec = SceneSpec {
            height: s.height,
            width: s.width,
            crowns: s.crowns,
            radius_min: s.radius_min,
            radius_max: s.radius_max,
            overlap_pairs: s.overlap_pairs,
            distractors: s.distractors,
            // Distinct, widely separated per-scene seeds under one run seed.
            seed: s.seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
        };
        let (img, gt, boxes) = synth_scene(&spec)?;
        let id = format!("scene_{i:03}");
        let img_name = format!("{id}.ppm");
        let gt_name = format!("{id}_gt.ppm");
        write_ppm(&s.out.join(&img_name), &img)?;
        write_ppm(&s.out.join(&gt_name), &gt)?;
        manifest.push((img_name, gt_name));
        all_boxes.extend(boxes.into_iter().map(|b| (id.clone(), b)));
    }
    write_manifest(&s.out.join("manifest.txt"), &manifest)?;
    write_boxes_csv(&s.out.join("boxes.csv"), &all_boxes)?;

    let mut rec = RunRecord::new("synth");
    rec.set("scenes", s.scenes);
    rec.set("height", s.height);
    rec.set("width", s.width);
    rec.set("crowns", s.crowns);
    rec.set("overlap_pairs", s.overlap_pairs);
    rec.set("distractors", s.distractors);
    rec.set("radius_min", s.radius_min);
    rec.set("radius_max", s.radius_max);
    rec.set("seed", s.seed);
    rec.write(&s.out.join("run.json"))
}

pub struct TrainSettings {
    pub data: PathBuf,
    pub out: PathBuf,
    pub arch: String,
    pub classes: u8,
    pub config: TrainConfig,
    pub no_batchnorm: bool,
    pub patch: usize,
    pub workers: usize,
}

/// `train`: load a manifest of scenes, build the patch dataset, train from a
/// seeded initialization, and write the model plus a per-epoch loss CSV.
pub fn run_train(s: &TrainSettings) -> Result<()> {
    s.config.validate()?;
    let arch = parse_arch(&s.arch)?;
    let manifest_path = s.data.join("manifest.txt");
    let entries = read_manifest(&manifest_path)?;
    if entries.is_empty() {
        return Err(Error::invalid("train", format!("{} lists no scenes", manifest_path.display())));
    }
    let mut scenes = Vec::with_capacity(entries.len());
    for (img, gt) in &entries {
        scenes.push((read_ppm(&s.data.join(img))?, read_ppm(&s.data.join(gt))?));
    }
    let set = build_training_set::<f32>(&scenes, s.classes, s.patch)?;

    let mut spec = NetworkSpec::build(arch, s.classes)?;
    if s.no_batchnorm {
        spec = spec.without_batchnorm();
    }
    let mut model: Model<f32> = init_params(&spec, s.config.seed);
    let trace = train(&mut model, &set, &s.config)?;
    model.save(&s.out)?;
    trace.write_csv(&sibling(&s.out, "loss.csv"))?;

    let mut rec = RunRecord::new("train");
    rec.set("arch", arch.name());
    rec.set("classes", s.classes);
    rec.set("data", s.data.display());
    rec.set("patches", set.len());
    rec.set("patch", s.patch);
    rec.set("epochs", s.config.epochs);
    rec.set("batch_size", s.config.batch_size);
    rec.set("learning_rate", s.config.learning_rate);
    rec.set(
        "class_weights",
        format!(
            "{},{},{}",
            s.config.class_weights[0], s.config.class_weights[1], s.config.class_weights[2]
        ),
    );
    rec.set("no_batchnorm", s.no_batchnorm);
    rec.set("seed", s.config.seed);
    rec.set("workers", s.workers);
    rec.write(&sibling(&s.out, "run.json"))
}

/// `name.ext` → `name.suffix` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".to_string())
}

fn load_image_tensor(path: &Path) -> Result<Tensor3<f32>> {
    Ok(read_ppm(path)?.to_input_tensor())
}

fn infer_probs(model: &Model<f32>, image: &Tensor3<f32>) -> Result<Tensor3<f32>> {
    let batch = Tensor4::from_examples(std::slice::from_ref(image))?;
    Ok(model.infer(&batch)?.example_tensor(0))
}

pub struct InferSettings {
    pub model: PathBuf,
    pub image: PathBuf,
    pub out_prefix: PathBuf,
    pub tau: f64,
    pub workers: usize,
}

/// `infer`: write the predicted class-index map and per-plane probability
/// heat maps for one image.
pub fn run_infer(s: &InferSettings) -> Result<()> {
    let model = Model::load(&s.model, None)?;
    let image = load_image_tensor(&s.image)?;
    let probs = infer_probs(&model, &image)?;
    let prefix = s.out_prefix.display();
    let seg = if model.spec.num_classes == 2 {
        let heat = GrayImage::from_probabilities(&probs, 0);
        mtnet_core::data::write_pgm(&PathBuf::from(format!("{prefix}_heat_mango.pgm")), &heat)?;
        threshold_map(&probs, s.tau)
    } else {
        for (ch, plane) in ["mango", "boundary", "background"].iter().enumerate() {
            let heat = GrayImage::from_probabilities(&probs, ch);
            mtnet_core::data::write_pgm(&PathBuf::from(format!("{prefix}_heat_{plane}.pgm")), &heat)?;
        }
        argmax_map(&net_to_code_order(&probs))
    };
    mtnet_core::data::write_pgm(&PathBuf::from(format!("{prefix}_map.pgm")), &seg.to_gray())?;

    let mut rec = RunRecord::new("infer");
    rec.set("model", s.model.display());
    rec.set("image", s.image.display());
    rec.set("classes", model.spec.num_classes);
    rec.set("tau", s.tau);
    rec.set("workers", s.workers);
    rec.write(&PathBuf::from(format!("{prefix}_run.json")))
}

pub struct DetectSettings {
    pub model: PathBuf,
    pub image: PathBuf,
    pub out_prefix: PathBuf,
    pub mode: DetectMode,
    pub tau: f64,
    pub min_size: usize,
    pub workers: usize,
}

/// `detect`: full pipeline on one image; writes the detection CSV and a PGM
/// of the retained components (255 = detected crown pixel).
pub fn run_detect(s: &DetectSettings) -> Result<()> {
    let model = Model::load(&s.model, None)?;
    if model.spec.num_classes != s.mode.num_classes() {
        return Err(Error::invalid(
            "detect",
            format!(
                "{} detection needs a {}-class model, {} is {}-class",
                s.mode,
                s.mode.num_classes(),
                s.model.display(),
                model.spec.num_classes
            ),
        ));
    }
    let image = load_image_tensor(&s.image)?;
    let probs = infer_probs(&model, &image)?;
    let binary = match s.mode {
        DetectMode::TwoClass => threshold_map(&probs, s.tau),
        DetectMode::ThreeClass => suppress_boundary(&argmax_map(&net_to_code_order(&probs))),
    };
    let comps = connected_components(&binary);
    let det = filter_and_boxes(&comps, s.min_size);

    let prefix = s.out_prefix.display();
    det.write_csv(&PathBuf::from(format!("{prefix}_boxes.csv")), &file_stem(&s.image))?;
    let mut annotated = GrayImage { h: comps.h, w: comps.w, data: vec![0; comps.h * comps.w] };
    let kept: std::collections::HashSet<u32> = det.detections.iter().map(|d| d.id).collect();
    for (dst, &l) in annotated.data.iter_mut().zip(&comps.labels) {
        if l != 0 && kept.contains(&l) {
            *dst = 255;
        }
    }
    mtnet_core::data::write_pgm(&PathBuf::from(format!("{prefix}_detected.pgm")), &annotated)?;

    let mut rec = RunRecord::new("detect");
    rec.set("model", s.model.display());
    rec.set("image", s.image.display());
    rec.set("mode", s.mode);
    rec.set("tau", s.tau);
    rec.set("min_size", s.min_size);
    rec.set("detections", det.len());
    rec.set("workers", s.workers);
    rec.write(&PathBuf::from(format!("{prefix}_run.json")))
}

pub enum EvalSettings {
    /// Class-index PGM prediction against annotated ground-truth PPM.
    Pixel { pred: PathBuf, truth: PathBuf, out: PathBuf },
    /// Detection CSV against annotation-box CSV, grouped by image id.
    Tree { pred: PathBuf, truth: PathBuf, iou_min: f64, out: PathBuf },
}

/// `eval`: metrics CSV (4 decimals); tree-level runs add a micro-averaged
/// `ALL` row across image ids.
pub fn run_eval(s: &EvalSettings) -> Result<()> {
    let mut rec = RunRecord::new("eval");
    let (rows, out) = match s {
        EvalSettings::Pixel { pred, truth, out } => {
            let map = read_pgm(pred)?;
            let num_classes = if map.data.iter().any(|&v| v == 2) { 3 } else { 2 };
            if let Some(&bad) = map.data.iter().find(|&&v| v >= 3) {
                return Err(Error::invalid(
                    "eval",
                    format!("{} holds class index {bad}; expected 0, 1, or 2", pred.display()),
                ));
            }
            let seg = SegmentationMap { h: map.h, w: map.w, num_classes, data: map.data };
            let (class, _, _) = decode_ground_truth(&read_ppm(truth)?)?;
            let (_, row) = pixel_metrics(&seg, &class)?;
            rec.set("mode", "pixel");
            rec.set("pred", pred.display());
            rec.set("truth", truth.display());
            (vec![(file_stem(pred), row)], out.clone())
        }
        EvalSettings::Tree { pred, truth, iou_min, out } => {
            let pred_rows = read_boxes_csv(pred)?;
            let truth_rows = read_boxes_csv(truth)?;
            let mut ids: Vec<String> = truth_rows
                .iter()
                .chain(&pred_rows)
                .map(|(id, _)| id.clone())
                .collect();
            ids.sort();
            ids.dedup();
            let mut rows: Vec<(String, MetricRow)> = Vec::new();
            let mut counts = Vec::new();
            for id in &ids {
                let dets = mtnet_core::detection::DetectionSet {
                    detections: pred_rows
                        .iter()
                        .filter(|(i, _)| i == id)
                        .enumerate()
                        .map(|(k, (_, b))| mtnet_core::detection::Detection {
                            id: k as u32 + 1,
                            pixel_count: b.area(),
                            bbox: *b,
                        })
                        .collect(),
                };
                let truths: Vec<_> = truth_rows
                    .iter()
                    .filter(|(i, _)| i == id)
                    .map(|(_, b)| *b)
                    .collect();
                let c = match_detections(&dets, &truths, *iou_min);
                counts.push(c);
                rows.push((id.clone(), mtnet_core::eval::metrics_from_counts(&c, false)));
            }
            rows.push(("ALL".to_string(), aggregate(&counts, false)?));
            rec.set("mode", "tree");
            rec.set("pred", pred.display());
            rec.set("truth", truth.display());
            rec.set("iou_min", iou_min);
            (rows, out.clone())
        }
    };
    write_metrics_csv(&out, &rows)?;
    rec.write(&sibling(&out, "run.json"))
}
