//! One function per pipeline step.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, ArrayView3};
use serde_json::json;

use segnbdt::hierarchy::{load_hierarchy, save_hierarchy, InducedHierarchy};
use segnbdt::model::{evaluate, evaluate_predictions, load_checkpoint, save_checkpoint, train, Checkpoint, EpochStats, Metrics};
use segnbdt::mrc::{default_class_report, mrc_class_stats, mrc_map, umrc_map, write_stats_csv, MrcMap};
use segnbdt::render;
use segnbdt::saliency::{save_maps, PamVariant, PixelSet, SaliencyContext, SaliencyMap, SaliencyTarget};
use segnbdt::sir::{fine_rule, parts_present, write_mode_comparison_csv, write_ranking_csv, FineRule};
use segnbdt::synth::{class_frequency, generate_dataset, load_dataset, save_dataset, Dataset, SegmentationSample};
use segnbdt::tree::{finetune, predict_image, InferenceMode, SegNbdt};
use segnbdt::vdr::{annotate_hierarchy, rules_to_json, VdrConfig};

use crate::config::RunConfig;
use crate::provenance::Provenance;
use crate::{CliError, Command};

type Res<T> = Result<T, CliError>;

/// Accuracy before removal, after zero masks and after shuffling, as
/// reported for the full-size setting this pipeline scales down.
pub const FULL_SCALE_REFERENCE: [(&str, f64); 3] = [("baseline", 53.1), ("zero", 35.9), ("shuffle", 32.4)];

pub struct Ctx {
    pub cfg: RunConfig,
    pub args: Vec<String>,
}

fn rt<E: Into<Box<dyn std::error::Error + Send + Sync>>>(op: &'static str) -> impl FnOnce(E) -> CliError {
    move |e| CliError::runtime(op, e)
}

impl Ctx {
    fn out(&self) -> &Path {
        &self.cfg.out
    }

    pub fn train_dir(&self) -> PathBuf {
        self.cfg
            .data
            .train_dir
            .clone()
            .unwrap_or_else(|| self.out().join("generate-data/train"))
    }

    pub fn test_dir(&self) -> PathBuf {
        self.cfg
            .data
            .test_dir
            .clone()
            .unwrap_or_else(|| self.out().join("generate-data/test"))
    }

    fn base_model(&self) -> PathBuf {
        self.out().join("train/model.safetensors")
    }

    fn induced_hierarchy(&self) -> PathBuf {
        self.out().join("induce/hierarchy.json")
    }

    fn finetuned_model(&self) -> PathBuf {
        self.out().join("finetune/model.safetensors")
    }

    fn finetuned_hierarchy(&self) -> PathBuf {
        self.out().join("finetune/hierarchy.json")
    }

    fn mode(&self) -> InferenceMode {
        self.cfg.mode.unwrap_or(InferenceMode::Soft)
    }

    /// Empty output directory for `step`.
    fn prepare(&self, step: &str) -> Res<PathBuf> {
        let dir = self.out().join(step);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(rt("clearing output directory"))?;
        }
        fs::create_dir_all(&dir).map_err(rt("creating output directory"))?;
        Ok(dir)
    }

    fn finish(&self, prov: Provenance, dir: &Path) -> Res<()> {
        prov.finish(&self.cfg, &self.args, dir).map_err(rt("writing run.json"))
    }
}

fn require(path: &Path, step: &str) -> Res<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "missing {} (produced by `{step}`); run `segnbdt {step}` first",
            path.display()
        )))
    }
}

fn require_train_data(ctx: &Ctx) -> Res<PathBuf> {
    let dir = ctx.train_dir();
    require(&dir.join(segnbdt::synth::MANIFEST_FILE), "generate-data")?;
    Ok(dir)
}

fn require_test_data(ctx: &Ctx) -> Res<PathBuf> {
    let dir = ctx.test_dir();
    require(&dir.join(segnbdt::synth::MANIFEST_FILE), "generate-data")?;
    Ok(dir)
}

/// The fine-tuned model and hierarchy, checked before anything else.
fn require_finetuned(ctx: &Ctx, prov: &mut Provenance) -> Res<(Checkpoint, InducedHierarchy)> {
    let (m, h) = (ctx.finetuned_model(), ctx.finetuned_hierarchy());
    require(&m, "finetune")?;
    require(&h, "finetune")?;
    prov.input(&m);
    prov.input(&h);
    Ok((
        load_checkpoint(&m).map_err(rt("loading fine-tuned model"))?,
        load_hierarchy(&h).map_err(rt("loading fine-tuned hierarchy"))?,
    ))
}

fn load(dir: &Path, prov: &mut Provenance) -> Res<Dataset> {
    prov.input(dir);
    load_dataset(dir).map_err(rt("loading dataset"))
}

fn first(ds: &Dataset, n: usize) -> &[SegmentationSample] {
    &ds.samples[..n.min(ds.samples.len())]
}

fn create(path: &Path) -> Res<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(rt("creating output file"))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Res<()> {
    let text = serde_json::to_string_pretty(value).map_err(rt("serialising JSON"))?;
    fs::write(path, text + "\n").map_err(rt("writing JSON"))
}

fn csv_writer(path: &Path) -> Res<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn write_row<I, S>(w: &mut csv::Writer<BufWriter<File>>, row: I) -> Res<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(row).map_err(rt("writing CSV"))
}

fn write_history(path: &Path, history: &[EpochStats]) -> Res<()> {
    let mut w = csv_writer(path)?;
    write_row(&mut w, ["epoch", "mean_loss"])?;
    for e in history {
        write_row(&mut w, [e.epoch.to_string(), e.mean_loss.to_string()])?;
    }
    w.flush().map_err(rt("writing CSV"))
}

fn save_png(img: &image::RgbImage, path: &Path) -> Res<()> {
    render::save_png(img, path).map_err(rt("writing PNG"))
}

pub fn run_step(ctx: &Ctx, step: Command) -> Res<()> {
    log::info!("running {}", step.name());
    match step {
        Command::GenerateData => generate_data(ctx),
        Command::Train => train_step(ctx),
        Command::Induce => induce(ctx),
        Command::Finetune => finetune_step(ctx),
        Command::Eval => eval(ctx),
        Command::Mrc => mrc(ctx),
        Command::Saliency => saliency(ctx),
        Command::Vdr => vdr(ctx),
        Command::Sir => sir(ctx),
        Command::Report => report(ctx),
        Command::Pipeline => Command::STEPS.iter().try_for_each(|&s| run_step(ctx, s)),
    }
}

fn generate_data(ctx: &Ctx) -> Res<()> {
    let prov = Provenance::start("generate-data");
    let dir = ctx.prepare("generate-data")?;
    let train_set = generate_dataset(&ctx.cfg.train_scene(), ctx.cfg.data.train_samples).map_err(rt("generating train data"))?;
    let test_set = generate_dataset(&ctx.cfg.test_scene(), ctx.cfg.data.test_samples).map_err(rt("generating test data"))?;
    save_dataset(&train_set, &dir.join("train")).map_err(rt("saving train data"))?;
    save_dataset(&test_set, &dir.join("test")).map_err(rt("saving test data"))?;
    let mut w = csv_writer(&dir.join("class_frequency.csv"))?;
    write_row(&mut w, ["split", "class", "frequency"])?;
    for (split, ds) in [("train", &train_set), ("test", &test_set)] {
        let freq = class_frequency(&ds.samples, ds.num_classes()).map_err(rt("class frequency"))?;
        for (name, f) in ds.class_names.iter().zip(freq) {
            write_row(&mut w, [split.to_string(), name.clone(), f.to_string()])?;
        }
    }
    w.flush().map_err(rt("writing CSV"))?;
    println!(
        "generated {} train and {} test images of {} classes",
        train_set.samples.len(),
        test_set.samples.len(),
        train_set.num_classes()
    );
    ctx.finish(prov, &dir)
}

fn train_step(ctx: &Ctx) -> Res<()> {
    let mut prov = Provenance::start("train");
    let train_dir = require_train_data(ctx)?;
    let ds = load(&train_dir, &mut prov)?;
    let dir = ctx.prepare("train")?;
    let ck = train(&ds.samples, &ctx.cfg.model_config(ds.num_classes()), &ctx.cfg.train_config()).map_err(rt("train"))?;
    save_checkpoint(&ck, &dir.join("model.safetensors")).map_err(rt("saving model"))?;
    write_history(&dir.join("history.csv"), &ck.history)?;
    let metrics = evaluate(&ck.network, &ds.samples).map_err(rt("evaluating on train data"))?;
    write_json(&dir.join("metrics.json"), &json!({ "train": metrics }))?;
    println!("train pixel accuracy {:.4}, mIoU {:.4}", metrics.pixel_accuracy, metrics.mean_iou);
    ctx.finish(prov, &dir)
}

/// Indented outline of the tree, one node per line.
pub fn render_tree(h: &InducedHierarchy) -> String {
    fn walk(h: &InducedHierarchy, id: usize, depth: usize, out: &mut String) {
        let n = &h.nodes[id];
        let names: Vec<&str> = n.class_set.iter().map(|&c| h.class_names[c].as_str()).collect();
        out.push_str(&format!("{}{} {{{}}}\n", "  ".repeat(depth), id, names.join(", ")));
        for &c in &n.children {
            walk(h, c, depth + 1, out);
        }
    }
    let mut out = String::new();
    walk(h, h.root_id, 0, &mut out);
    out
}

fn induce(ctx: &Ctx) -> Res<()> {
    let mut prov = Provenance::start("induce");
    let model = ctx.base_model();
    require(&model, "train")?;
    let test_dir = require_test_data(ctx)?;
    prov.input(&model);
    let ck = load_checkpoint(&model).map_err(rt("loading model"))?;
    let ds = load(&test_dir, &mut prov)?;
    let dir = ctx.prepare("induce")?;
    let h = InducedHierarchy::induce_named(ck.network.final_layer_weights(), ds.class_names.clone()).map_err(rt("induce"))?;
    save_hierarchy(&h, &dir.join("hierarchy.json")).map_err(rt("saving hierarchy"))?;
    let tree = render_tree(&h);
    fs::write(dir.join("tree.txt"), &tree).map_err(rt("writing tree"))?;
    print!("{tree}");
    ctx.finish(prov, &dir)
}

fn finetune_step(ctx: &Ctx) -> Res<()> {
    let mut prov = Provenance::start("finetune");
    let (model, hier) = (ctx.base_model(), ctx.induced_hierarchy());
    require(&model, "train")?;
    require(&hier, "induce")?;
    let train_dir = require_train_data(ctx)?;
    prov.input(&model);
    prov.input(&hier);
    let ck = load_checkpoint(&model).map_err(rt("loading model"))?;
    let h = load_hierarchy(&hier).map_err(rt("loading hierarchy"))?;
    let ds = load(&train_dir, &mut prov)?;
    let dir = ctx.prepare("finetune")?;
    let (ft, ft_h) = finetune(&ck, &h, &ds.samples, &ctx.cfg.finetune_config()).map_err(rt("finetune"))?;
    save_checkpoint(&ft, &dir.join("model.safetensors")).map_err(rt("saving model"))?;
    save_hierarchy(&ft_h, &dir.join("hierarchy.json")).map_err(rt("saving hierarchy"))?;
    write_history(&dir.join("history.csv"), &ft.history)?;
    ctx.finish(prov, &dir)
}

#[derive(serde::Serialize)]
struct EvalRow {
    model: &'static str,
    mode: &'static str,
    metrics: Metrics,
    /// Percentage points relative to the base network.
    delta_accuracy: f64,
    delta_miou: f64,
}

fn mode_name(m: InferenceMode) -> &'static str {
    match m {
        InferenceMode::Hard => "hard",
        InferenceMode::Soft => "soft",
    }
}

fn eval(ctx: &Ctx) -> Res<()> {
    let mut prov = Provenance::start("eval");
    let (model, hier) = (ctx.base_model(), ctx.induced_hierarchy());
    require(&model, "train")?;
    require(&hier, "induce")?;
    let test_dir = require_test_data(ctx)?;
    prov.input(&model);
    prov.input(&hier);
    let base = load_checkpoint(&model).map_err(rt("loading model"))?;
    let h = load_hierarchy(&hier).map_err(rt("loading hierarchy"))?;
    let finetuned = if ctx.finetuned_model().exists() && ctx.finetuned_hierarchy().exists() {
        Some(require_finetuned(ctx, &mut prov)?)
    } else {
        None
    };
    let ds = load(&test_dir, &mut prov)?;
    let dir = ctx.prepare("eval")?;
    let c = ds.num_classes();
    let modes: Vec<InferenceMode> = match ctx.cfg.mode {
        Some(m) => vec![m],
        None => vec![InferenceMode::Hard, InferenceMode::Soft],
    };
    let base_metrics = evaluate(&base.network, &ds.samples).map_err(rt("eval"))?;
    let row = |model, mode, metrics: Metrics| EvalRow {
        model,
        mode,
        delta_accuracy: 100.0 * (metrics.pixel_accuracy - base_metrics.pixel_accuracy),
        delta_miou: 100.0 * (metrics.mean_iou - base_metrics.mean_iou),
        metrics,
    };
    let mut rows = vec![row("base", "network", base_metrics.clone())];
    let mut trees: Vec<(&'static str, &Checkpoint, &InducedHierarchy)> = vec![("induced", &base, &h)];
    if let Some((ft, ft_h)) = &finetuned {
        let m = evaluate(&ft.network, &ds.samples).map_err(rt("eval"))?;
        rows.push(row("finetuned", "network", m));
        trees.push(("finetuned", ft, ft_h));
    }
    for (name, ck, tree) in trees {
        for &mode in &modes {
            let m = evaluate_predictions(&ds.samples, c, |s| predict_image(&ck.network, tree, s.image.view(), mode))
                .map_err(rt("eval"))?;
            rows.push(row(name, mode_name(mode), m));
        }
    }
    let mut w = csv_writer(&dir.join("eval.csv"))?;
    write_row(&mut w, ["model", "mode", "pixel_accuracy", "mean_iou", "delta_accuracy", "delta_miou"])?;
    for r in &rows {
        write_row(
            &mut w,
            [
                r.model.to_string(),
                r.mode.to_string(),
                r.metrics.pixel_accuracy.to_string(),
                r.metrics.mean_iou.to_string(),
                r.delta_accuracy.to_string(),
                r.delta_miou.to_string(),
            ],
        )?;
    }
    w.flush().map_err(rt("writing CSV"))?;
    write_json(&dir.join("eval.json"), &json!({ "class_names": ds.class_names, "rows": rows }))?;
    println!("{:<10} {:<8} {:>9} {:>8} {:>8}", "model", "mode", "accuracy", "mIoU", "delta");
    for r in &rows {
        println!(
            "{:<10} {:<8} {:>9.2} {:>8.2} {:>+8.2}",
            r.model,
            r.mode,
            100.0 * r.metrics.pixel_accuracy,
            100.0 * r.metrics.mean_iou,
            r.delta_accuracy
        );
    }
    ctx.finish(prov, &dir)
}

fn mrc(ctx: &Ctx) -> Res<()> {
    let mut prov = Provenance::start("mrc");
    let (ck, h) = require_finetuned(ctx, &mut prov)?;
    let test_dir = require_test_data(ctx)?;
    let ds = load(&test_dir, &mut prov)?;
    let dir = ctx.prepare("mrc")?;
    let cfg = ctx.cfg.mrc.mrc_config();
    let seg = SegNbdt {
        network: &ck.network,
        hierarchy: &h,
        mode: ctx.mode(),
    };
    let samples = first(&ds, ctx.cfg.mrc.images);
    let max_size = cfg.beta * cfg.n;
    let scale = ctx.cfg.report.scale;
    let (mut maps, mut umaps, mut labels): (Vec<MrcMap>, Vec<MrcMap>, Vec<Array2<u16>>) = Default::default();
    for (i, s) in samples.iter().enumerate() {
        let m = mrc_map(&seg, s.image.view(), s.label.view(), s.ignore.view(), &cfg).map_err(rt("mrc_map"))?;
        let u = umrc_map(&seg, s.image.view(), &cfg, ctx.cfg.mrc.monotone).map_err(rt("umrc_map"))?;
        let strip = render::hstack(
            &[
                render::render_image(s.image.view()),
                render::render_labels(s.label.view()),
                render::render_mrc(&m, max_size),
                render::render_mrc(&u, max_size),
            ]
            .map(|p| render::upscale(&p, scale)),
            2,
        );
        save_png(&strip, &dir.join(format!("mrc_{i:03}.png")))?;
        maps.push(m);
        umaps.push(u);
        labels.push(s.label.clone());
    }
    let c = ds.num_classes();
    let stats = mrc_class_stats(&maps, &labels, c, Some(&h)).map_err(rt("mrc statistics"))?;
    let ustats = mrc_class_stats(&umaps, &labels, c, Some(&h)).map_err(rt("umrc statistics"))?;
    write_stats_csv(&stats, &ds.class_names, create(&dir.join("mrc_stats.csv"))?).map_err(rt("writing CSV"))?;
    write_stats_csv(&ustats, &ds.class_names, create(&dir.join("umrc_stats.csv"))?).map_err(rt("writing CSV"))?;
    let report = default_class_report(&stats, Some(&h)).map_err(rt("default class report"))?;
    write_json(&dir.join("default_class.json"), &report)?;
    println!("{:<14} {:>8} {:>9} {:>6}", "class", "avg_mrc", "miss_rate", "depth");
    for s in &stats {
        println!(
            "{:<14} {:>8} {:>9} {:>6}",
            ds.class_names[s.class],
            s.avg_mrc.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()),
            s.miss_rate.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
            s.leaf_depth.map(|d| d.to_string()).unwrap_or_else(|| "-".into()),
        );
    }
    if let Some(cand) = report.candidate {
        println!("least context: {}", ds.class_names[cand]);
    }
    ctx.finish(prov, &dir)
}

/// Mean of `map` over pixels where `mask` holds, `None` if there are none.
fn masked_mean(map: ArrayView2<f64>, mask: impl Fn(usize, usize) -> bool) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for ((y, x), &v) in map.indexed_iter() {
        if mask(y, x) {
            sum += v;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

fn present_classes(map: ArrayView2<u16>) -> Vec<usize> {
    let mut v: Vec<usize> = map.iter().map(|&c| c as usize).collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn saliency(ctx: &Ctx) -> Res<()> {
    let mut prov = Provenance::start("saliency");
    let (ck, h) = require_finetuned(ctx, &mut prov)?;
    let test_dir = require_test_data(ctx)?;
    let ds = load(&test_dir, &mut prov)?;
    let dir = ctx.prepare("saliency")?;
    let net = ck.network.cast::<f64>();
    let layer = ctx.cfg.saliency.layer.as_str();
    let scale = ctx.cfg.report.scale;
    let mut stored: Vec<(String, SaliencyMap)> = Vec::new();
    let mut w = csv_writer(&dir.join("discrimination.csv"))?;
    write_row(
        &mut w,
        ["image", "class", "node", "child", "variant", "inside_mean", "outside_mean", "inside_greater"],
    )?;
    let mut passes: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (i, s) in first(&ds, ctx.cfg.saliency.images).iter().enumerate() {
        let pred = predict_image(&net, &h, s.image.view(), ctx.mode()).map_err(rt("predict"))?;
        let region = if ctx.cfg.saliency.ground_truth { &s.label } else { &pred };
        let sal = SaliencyContext::new(&net, s.image.view(), layer).map_err(rt("saliency"))?;
        for c in present_classes(region.view()) {
            let leaf = h.leaf_of(c).map_err(rt("saliency"))?;
            let Some(node) = h.parent(leaf) else { continue };
            let child = h.nodes[node].children.iter().position(|&k| k == leaf).expect("child of parent");
            let target = SaliencyTarget::Node { node, child };
            let cam = sal.grad_cam(c).map_err(rt("grad_cam"))?;
            let relu = sal
                .class_average(&target, Some(&h), region.view(), c, PamVariant::Relu)
                .map_err(rt("node grad_pam"))?;
            let abs = sal
                .class_average(&target, Some(&h), region.view(), c, PamVariant::Abs)
                .map_err(rt("node grad_pam"))?;
            let name = &ds.class_names[c];
            let inside = |y: usize, x: usize| s.label[[y, x]] as usize == c && !s.ignore[[y, x]];
            let outside = |y: usize, x: usize| s.label[[y, x]] as usize != c && !s.ignore[[y, x]];
            for (variant, map) in [("grad_cam", &cam), ("grad_pam_relu", &relu), ("grad_pam_abs", &abs)] {
                let (a, b) = (masked_mean(map.values.view(), inside), masked_mean(map.values.view(), outside));
                let pass = matches!((a, b), (Some(a), Some(b)) if a > b);
                let e = passes.entry(variant).or_default();
                e.0 += pass as usize;
                e.1 += 1;
                let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
                write_row(
                    &mut w,
                    [
                        i.to_string(),
                        name.clone(),
                        node.to_string(),
                        child.to_string(),
                        variant.to_string(),
                        opt(a),
                        opt(b),
                        pass.to_string(),
                    ],
                )?;
            }
            let strip = render::hstack(
                &[
                    render::render_image(s.image.view()),
                    render::render_labels(region.view()),
                    render::render_saliency(cam.values.view()),
                    render::render_saliency(relu.values.view()),
                    render::render_saliency(abs.values.view()),
                ]
                .map(|p| render::upscale(&p, scale)),
                2,
            );
            save_png(&strip, &dir.join(format!("saliency_{i:03}_{name}.png")))?;
            stored.push((format!("image{i}/{name}/grad_cam"), cam));
            stored.push((format!("image{i}/{name}/grad_pam_relu"), relu));
            stored.push((format!("image{i}/{name}/grad_pam_abs"), abs));
        }
    }
    w.flush().map_err(rt("writing CSV"))?;
    let refs: Vec<(String, &SaliencyMap)> = stored.iter().map(|(n, m)| (n.clone(), m)).collect();
    save_maps(&refs, &dir.join("maps.safetensors")).map_err(rt("saving maps"))?;
    for (variant, (p, n)) in &passes {
        println!("{variant:<14} inside > outside in {p}/{n}");
    }
    ctx.finish(prov, &dir)
}

fn views(samples: &[SegmentationSample]) -> Vec<(ArrayView3<'_, f32>, ArrayView2<'_, u16>)> {
    samples.iter().map(|s| (s.image.view(), s.label.view())).collect()
}

fn vdr(ctx: &Ctx) -> Res<()> {
    let mut prov = Provenance::start("vdr");
    let (ck, h) = require_finetuned(ctx, &mut prov)?;
    let test_dir = require_test_data(ctx)?;
    let ds = load(&test_dir, &mut prov)?;
    let dir = ctx.prepare("vdr")?;
    let net = ck.network.cast::<f64>();
    let cfg = VdrConfig {
        layer: ctx.cfg.vdr.layer.clone(),
        overlap: ctx.cfg.vdr.overlap,
    };
    let rules = annotate_hierarchy(&net, &h, &views(first(&ds, ctx.cfg.vdr.images)), &cfg);
    write_json(&dir.join("node_rules.json"), &rules_to_json(&rules, &h))?;
    for r in &rules {
        match &r.rule {
            Some(rule) => {
                let names: Vec<&str> = rule.selected_classes.iter().map(|&c| h.class_names[c].as_str()).collect();
                println!("node {}: looks for {{{}}}{}", r.node, names.join(", "), if rule.tie { " (tie)" } else { "" });
            }
            None => println!("node {}: no rule ({})", r.node, r.error.as_deref().unwrap_or("")),
        }
    }
    ctx.finish(prov, &dir)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn sir(ctx: &Ctx) -> Res<()> {
    let mut prov = Provenance::start("sir");
    let (ck, h) = require_finetuned(ctx, &mut prov)?;
    let test_dir = require_test_data(ctx)?;
    let nodes = match &ctx.cfg.sir.nodes {
        Some(n) => n.clone(),
        None => h.inner_nodes(),
    };
    for &n in &nodes {
        if h.nodes.get(n).is_none_or(|node| node.is_leaf()) {
            return Err(CliError::Config(format!("sir.nodes: {n} is not an inner node")));
        }
    }
    let ds = load(&test_dir, &mut prov)?;
    let dir = ctx.prepare("sir")?;
    let samples = first(&ds, ctx.cfg.sir.images);
    let candidates = parts_present(samples);
    let modes = ctx.cfg.removal_modes();
    let mut rules: Vec<FineRule> = Vec::new();
    for &node in &nodes {
        for &mode in &modes {
            rules.push(fine_rule(&ck.network, &h, node, samples, Some(&candidates), mode).map_err(rt("fine_rule"))?);
        }
    }
    write_ranking_csv(&rules, create(&dir.join("sir_ranking.csv"))?).map_err(rt("writing CSV"))?;
    let part_names: BTreeMap<i32, String> = ds
        .parts
        .iter()
        .map(|p| (p.part_id, format!("{}/{}", ds.class_names[p.class_id], p.name)))
        .collect();
    let mut summary = serde_json::Map::new();
    for &mode in &modes {
        let of_mode = rules.iter().filter(|r| r.mode == mode);
        let all: Vec<_> = of_mode.flat_map(|r| r.parts.iter().map(|p| &p.damage)).collect();
        summary.insert(
            mode.name().to_string(),
            json!({
                "mean_baseline": mean(all.iter().map(|d| d.baseline)),
                "mean_removed": mean(all.iter().map(|d| d.removed)),
                "mean_damage": mean(all.iter().map(|d| d.damage)),
            }),
        );
    }
    if modes.len() == 2 {
        let pairs: Vec<(&FineRule, &FineRule)> = rules.chunks(2).map(|p| (&p[0], &p[1])).collect();
        write_mode_comparison_csv(&pairs, &part_names, create(&dir.join("sir_modes.csv"))?).map_err(rt("writing CSV"))?;
    }
    let reference: serde_json::Map<String, serde_json::Value> =
        FULL_SCALE_REFERENCE.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    let top: Vec<serde_json::Value> = rules
        .iter()
        .map(|r| {
            json!({
                "node": r.node,
                "mode": r.mode.name(),
                "parts": r.parts.iter().map(|p| part_names.get(&p.damage.part_id).cloned()
                    .unwrap_or_else(|| p.damage.part_id.to_string())).collect::<Vec<_>>(),
            })
        })
        .collect();
    write_json(
        &dir.join("sir_summary.json"),
        &json!({ "modes": summary, "full_scale_reference_accuracy": reference, "rules": top }),
    )?;
    for r in &rules {
        let names: Vec<String> = r
            .parts
            .iter()
            .take(3)
            .map(|p| format!("{} {:.4}", part_names.get(&p.damage.part_id).map_or("?", |s| s.as_str()), p.damage.damage))
            .collect();
        println!("node {} ({}): {}", r.node, r.mode.name(), names.join(", "));
    }
    for &mode in &modes {
        let s = &summary[mode.name()];
        println!(
            "{:<8} mean accuracy {:.2} -> {:.2} after removal",
            mode.name(),
            100.0 * s["mean_baseline"].as_f64().unwrap_or(0.0),
            100.0 * s["mean_removed"].as_f64().unwrap_or(0.0)
        );
    }
    println!(
        "full-scale reference: {:.1} -> {:.1} (zero) / {:.1} (shuffle); not expected to hold at this scale",
        FULL_SCALE_REFERENCE[0].1, FULL_SCALE_REFERENCE[1].1, FULL_SCALE_REFERENCE[2].1
    );
    ctx.finish(prov, &dir)
}

/// Most frequent class in `pred` other than `background`, ties to the lower
/// id; `background` when nothing else is predicted.
pub fn report_class(pred: ArrayView2<u16>, num_classes: usize, background: usize) -> usize {
    let mut counts = vec![0usize; num_classes];
    for &c in pred {
        counts[c as usize] += 1;
    }
    let mut best = background;
    let mut best_n = 0;
    for (c, &n) in counts.iter().enumerate() {
        if c != background && n > best_n {
            best = c;
            best_n = n;
        }
    }
    best
}

fn report(ctx: &Ctx) -> Res<()> {
    let mut prov = Provenance::start("report");
    let (ck, h) = require_finetuned(ctx, &mut prov)?;
    let test_dir = require_test_data(ctx)?;
    let rules_path = ctx.out().join("vdr/node_rules.json");
    let rules: Option<serde_json::Value> = if rules_path.exists() {
        prov.input(&rules_path);
        let text = fs::read_to_string(&rules_path).map_err(rt("reading node rules"))?;
        Some(serde_json::from_str(&text).map_err(rt("parsing node rules"))?)
    } else {
        None
    };
    let ds = load(&test_dir, &mut prov)?;
    let dir = ctx.prepare("report")?;
    let net = ck.network.cast::<f64>();
    let scale = ctx.cfg.report.scale;
    let bg = ds.spec.background_class_id;
    let looks_for = |node: usize| -> Option<String> {
        let nodes = rules.as_ref()?.get("nodes")?.as_array()?;
        let entry = nodes.iter().find(|n| n["node"].as_u64() == Some(node as u64))?;
        let set: Vec<&str> = entry.get("class_set")?.as_array()?.iter().filter_map(|v| v.as_str()).collect();
        Some(set.join(", "))
    };
    let mut figures = Vec::new();
    for (i, s) in first(&ds, ctx.cfg.report.images).iter().enumerate() {
        let pred = predict_image(&net, &h, s.image.view(), ctx.mode()).map_err(rt("predict"))?;
        let c = report_class(pred.view(), ds.num_classes(), bg);
        let mask = pred.mapv(|p| p as usize == c);
        let set = PixelSet::from_mask(mask.view()).map_err(rt("report"))?;
        let sal = SaliencyContext::new(&net, s.image.view(), &ctx.cfg.report.layer).map_err(rt("saliency"))?;
        let mut panels = vec![
            render::render_image(s.image.view()),
            render::render_labels(s.label.view()),
            render::render_labels(pred.view()),
        ];
        let mut names = vec!["image".to_string(), "label".into(), "prediction".into()];
        let mut captions = Vec::new();
        for (node, child) in h.path_to_class(c).map_err(rt("report"))? {
            let map = sal
                .node_grad_pam(&h, node, child, &set, PamVariant::Relu)
                .map_err(rt("node grad_pam"))?;
            panels.push(render::render_saliency(map.values.view()));
            names.push(format!("node {node}, child {child}"));
            let chosen = h.nodes[h.nodes[node].children[child]]
                .class_set
                .iter()
                .map(|&k| h.class_names[k].as_str())
                .collect::<Vec<_>>()
                .join(", ");
            captions.push(match looks_for(node) {
                Some(rule) => format!("node {node}: goes to {{{chosen}}}; looks for {{{rule}}}"),
                None => format!("node {node}: goes to {{{chosen}}}"),
            });
        }
        let panels: Vec<_> = panels.iter().map(|p| render::upscale(p, scale)).collect();
        let file = format!("figure_{i:03}.png");
        save_png(&render::hstack(&panels, 2), &dir.join(&file))?;
        figures.push(json!({
            "file": file,
            "image": i,
            "class": c,
            "class_name": ds.class_names[c],
            "mode": mode_name(ctx.mode()),
            "layer": ctx.cfg.report.layer,
            "panels": names,
            "captions": captions,
        }));
    }
    write_json(&dir.join("report.json"), &json!({ "figures": figures }))?;
    println!("wrote {} figures to {}", figures.len(), dir.display());
    ctx.finish(prov, &dir)
}
