//! Command bodies. Each reads its inputs, writes artifacts into `out`, and
//! returns nothing; manifests are handled by the caller.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::{s, Array2, Array3, Array4, Axis};
use posdiffae::datagen::PatchRecord;
use posdiffae::datagen::is_training_section;
use posdiffae::dataset::{write_dataset, Dataset, IndexEntry, CLEAN};
use posdiffae::evaluation::{
    blob_stats, classification_probe, encode_records, frechet_feature_distance, head_position_mse,
    image_fidelity, project_latents_2d, regression_probe, texture_features, LabeledLatent,
    MetricReport, ProbeOptions, DEFAULT_BLOB_THRESHOLD,
};
use posdiffae::imageio::{load_mask, load_png, save_mask, save_png};
use posdiffae::networks::checkpoint::{self, Manifest as CheckpointManifest};
use posdiffae::networks::ModelBundle;
use posdiffae::restoration::{
    detect_tear_mask, restore_jpeg_batch, restore_tear_roi, ArtifactMask, JpegRestoreConfig,
};
use posdiffae::schedule::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START};
use posdiffae::training::{train_with, EpochRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};
use crate::plot;

pub const MODEL_FILE: &str = "model.safetensors";

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> Result<(ModelBundle<f32>, NoiseSchedule, CheckpointManifest)> {
    let (bundle, m) = checkpoint::load(path).with_context(|| format!("loading model {}", path.display()))?;
    let sched = NoiseSchedule::linear(m.net.steps, m.beta_start, m.beta_end)?;
    Ok((bundle, sched, m))
}

fn load_dataset(path: &Path, keep: impl Fn(&IndexEntry) -> bool) -> Result<Dataset> {
    Dataset::load_filtered(path, keep).with_context(|| format!("loading dataset {}", path.display()))
}

fn check_patch(bundle: &ModelBundle<f32>, ds: &Dataset) -> Result<()> {
    let p = ds.manifest.config.patch;
    if (bundle.config.height, bundle.config.width) != (p, p) {
        return Err(ConfigError(format!(
            "data.patch: dataset patches are {p}x{p} but the model expects {}x{}",
            bundle.config.height, bundle.config.width
        ))
        .into());
    }
    Ok(())
}

fn probe_options(cfg: &RunConfig) -> ProbeOptions {
    ProbeOptions {
        balance: cfg.eval.balance,
        standardize: cfg.eval.standardize,
        seed: cfg.eval.seed,
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let m = write_dataset(&cfg.data, &out.join("dataset"))?;
    let n: usize = m.sections.iter().map(|s| s.patches).sum();
    log::info!("wrote {} sections, {n} clean patches", m.sections.len());
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = load_dataset(data, |e| e.artifact_kind == CLEAN && is_training_section(e.section_id))?;
    let records = ds.records(CLEAN, true);
    if records.is_empty() {
        bail!("dataset {} has no clean training patches", data.display());
    }
    let mut net = cfg.net()?;
    net.height = ds.manifest.config.patch;
    net.width = ds.manifest.config.patch;
    let bundle = ModelBundle::<f32>::new(net.clone(), cfg.model.init_seed)?;
    let sched = NoiseSchedule::linear(cfg.train.steps, DEFAULT_BETA_START, DEFAULT_BETA_END)?;
    log::info!("training {} parameters on {} patches", bundle.num_params(), records.len());
    let outcome = train_with(bundle, &records, &sched, &cfg.train, |ep, l| {
        log::info!("epoch {ep}: mse {:.4} r {:.4} theta {:.4}", l.l_mse, l.l_r, l.l_theta)
    })?;

    let manifest = CheckpointManifest {
        net,
        beta_start: DEFAULT_BETA_START,
        beta_end: DEFAULT_BETA_END,
        lambdas: [cfg.train.lambda1, cfg.train.lambda2, cfg.train.lambda3],
        num_params: outcome.bundle.num_params(),
    };
    checkpoint::save(&outcome.bundle, &manifest, &out.join(MODEL_FILE))?;
    let history: Vec<EpochRecord> = outcome.history.iter().enumerate().map(|(i, l)| EpochRecord::new(i, l)).collect();
    write_jsonl(&out.join("history.jsonl"), &history)?;
    fs::write(out.join("loss_curve.svg"), plot::loss_curve(&history))?;
    Ok(())
}

#[derive(Serialize)]
struct LatentLine<'a> {
    split: &'a str,
    section_id: u32,
    x_p: usize,
    y_p: usize,
    region: usize,
    r0: f64,
    theta0: f64,
    z: &'a [f64],
}

/// Clean latents split by section parity, in dataset order.
fn split_latents(bundle: &ModelBundle<f32>, ds: &Dataset) -> Result<(Vec<LabeledLatent>, Vec<LabeledLatent>)> {
    let train = encode_records(bundle, &ds.records(CLEAN, true))?;
    let test = encode_records(bundle, &ds.records(CLEAN, false))?;
    if train.is_empty() || test.is_empty() {
        bail!("dataset needs clean patches from both training and validation sections");
    }
    Ok((train, test))
}

pub fn encode(_cfg: &RunConfig, model: &Path, data: &Path, out: &Path) -> Result<()> {
    let (bundle, _, _) = load_model(model)?;
    let ds = load_dataset(data, |e| e.artifact_kind == CLEAN)?;
    check_patch(&bundle, &ds)?;
    let recs: Vec<PatchRecord> = ds.entries.iter().map(|(_, r)| r.clone()).collect();
    let lat = encode_records(&bundle, &recs)?;
    let lines: Vec<LatentLine> = ds
        .entries
        .iter()
        .zip(&lat)
        .map(|((e, _), l)| LatentLine {
            split: if is_training_section(e.section_id) { "train" } else { "test" },
            section_id: e.section_id,
            x_p: e.x_p,
            y_p: e.y_p,
            region: e.region,
            r0: e.r0,
            theta0: e.theta0,
            z: &l.z,
        })
        .collect();
    write_jsonl(&out.join("latents.jsonl"), &lines)?;
    Ok(())
}

pub fn classify(cfg: &RunConfig, model: &Path, data: &Path, out: &Path) -> Result<()> {
    let (bundle, _, _) = load_model(model)?;
    let ds = load_dataset(data, |e| e.artifact_kind == CLEAN)?;
    check_patch(&bundle, &ds)?;
    let (train, test) = split_latents(&bundle, &ds)?;
    let rep = classification_probe(&train, &test, &probe_options(cfg))?;
    log::info!("accuracy {:.4}, kappa {:.4}", rep.accuracy, rep.kappa);
    write_json(&out.join("classification.json"), &rep)?;
    write_json(&out.join("metrics.json"), &MetricReport::default().with_classification(&rep))?;
    Ok(())
}

#[derive(Serialize)]
struct RegressionOutput {
    linear_fit: [f64; 2],
    heads: [f64; 2],
}

pub fn regress(_cfg: &RunConfig, model: &Path, data: &Path, out: &Path) -> Result<()> {
    let (bundle, _, _) = load_model(model)?;
    let ds = load_dataset(data, |e| e.artifact_kind == CLEAN)?;
    check_patch(&bundle, &ds)?;
    let (train, test) = split_latents(&bundle, &ds)?;
    let (lr, lt) = regression_probe(&train, &test)?;
    let (hr, ht) = head_position_mse(&bundle, &test)?;
    log::info!("heads: mse r {hr:.5}, theta {ht:.5}; linear fit: r {lr:.5}, theta {lt:.5}");
    write_json(
        &out.join("regression.json"),
        &RegressionOutput {
            linear_fit: [lr, lt],
            heads: [hr, ht],
        },
    )?;
    let report = MetricReport {
        mse_r: Some(hr),
        mse_theta: Some(ht),
        ..MetricReport::default()
    };
    write_json(&out.join("metrics.json"), &report)?;
    Ok(())
}

/// Window-aligned rectangle covering the mask plus one window of context
/// above and to the left, clipped to the tiled part of the image.
fn tear_roi(mask: &Array2<bool>, win: (usize, usize)) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = mask.dim();
    let (rows, cols) = (h / win.0, w / win.1);
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for ((y, x), &m) in mask.indexed_iter() {
        if m && y < rows * win.0 && x < cols * win.1 {
            let (r, c) = (y / win.0, x / win.1);
            bounds = Some(match bounds {
                None => (r, c, r, c),
                Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
            });
        }
    }
    let (r0, c0, r1, c1) = bounds?;
    Some((r0.saturating_sub(1), c0.saturating_sub(1), r1 + 1, c1 + 1))
}

#[derive(Serialize)]
struct TearOutput {
    roi_origin: (usize, usize),
    roi_shape: (usize, usize),
    untiled_masked_pixels: usize,
    report: Option<posdiffae::restoration::TearRestoreReport>,
}

pub fn restore_tear(cfg: &RunConfig, model: &Path, input: &Path, mask: Option<&Path>, out: &Path) -> Result<()> {
    let (bundle, sched, _) = load_model(model)?;
    let img = load_png(input)?;
    let (_, h, w) = img.dim();
    let m = match mask {
        Some(p) => ArtifactMask(load_mask(p)?),
        None => detect_tear_mask(&img, cfg.restore.whiteness_threshold),
    };
    if m.dim() != (h, w) {
        bail!("mask is {:?} but the image is {h}x{w}", m.dim());
    }
    let win = (bundle.config.height, bundle.config.width);
    if h < win.0 || w < win.1 {
        bail!("image {h}x{w} is smaller than one {}x{} window", win.0, win.1);
    }
    let mut result = img.clone();
    let mut output = TearOutput {
        roi_origin: (0, 0),
        roi_shape: (0, 0),
        untiled_masked_pixels: 0,
        report: None,
    };
    if let Some((r0, c0, r1, c1)) = tear_roi(&m.0, win) {
        let (y0, x0, y1, x1) = (r0 * win.0, c0 * win.1, r1 * win.0, c1 * win.1);
        let roi = img.slice(s![.., y0..y1, x0..x1]).to_owned();
        let roi_mask = m.window(y0, x0, y1 - y0, x1 - x0);
        let (restored, mut report) =
            restore_tear_roi(&roi, &roi_mask, &bundle, &sched, cfg.restore.tear_steps, cfg.restore.seed)?;
        report.plan.roi_origin = (y0, x0);
        result.slice_mut(s![.., y0..y1, x0..x1]).assign(&restored);
        output.roi_origin = (y0, x0);
        output.roi_shape = (y1 - y0, x1 - x0);
        output.report = Some(report);
    }
    output.untiled_masked_pixels = m
        .0
        .indexed_iter()
        .filter(|((y, x), &v)| v && (*y >= h / win.0 * win.0 || *x >= w / win.1 * win.1))
        .count();
    if output.untiled_masked_pixels > 0 {
        log::warn!("{} masked pixels lie outside the window grid and were left as is", output.untiled_masked_pixels);
    }
    save_png(&out.join("restored.png"), &result)?;
    save_mask(&out.join("mask.png"), &m.0)?;
    write_json(&out.join("restore_report.json"), &output)?;
    Ok(())
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("listing {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no PNG files in {}", input.display());
    }
    Ok(files)
}

fn stack(images: &[Array3<f32>]) -> Array4<f32> {
    let (c, h, w) = images[0].dim();
    let mut x = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        x.index_axis_mut(Axis(0), i).assign(img);
    }
    x
}

#[derive(Serialize)]
struct JpegOutput {
    config: JpegRestoreConfig,
    files: Vec<String>,
}

pub fn restore_jpeg(cfg: &RunConfig, model: &Path, input: &Path, out: &Path) -> Result<()> {
    let (bundle, sched, _) = load_model(model)?;
    let files = png_inputs(input)?;
    let images = files.iter().map(|f| Ok(load_png(f)?)).collect::<Result<Vec<_>>>()?;
    let expected = (bundle.config.channels, bundle.config.height, bundle.config.width);
    if let Some((f, _)) = files.iter().zip(&images).find(|(_, i)| i.dim() != expected) {
        bail!("{} does not match the model's {:?} input", f.display(), expected);
    }
    let jcfg = cfg.restore.jpeg();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.restore.seed);
    let restored = restore_jpeg_batch(&stack(&images), &jcfg, &bundle, &sched, &mut rng)?;
    let dir = out.join("restored");
    fs::create_dir_all(&dir)?;
    let mut names = Vec::new();
    for (f, r) in files.iter().zip(restored.outer_iter()) {
        let name = f.file_name().expect("file").to_string_lossy().into_owned();
        save_png(&dir.join(&name), &r.to_owned())?;
        names.push(name);
    }
    write_json(&out.join("restore_report.json"), &JpegOutput { config: jcfg, files: names })?;
    Ok(())
}

type Key = (u32, usize, usize);

fn key(e: &IndexEntry) -> Key {
    (e.section_id, e.x_p, e.y_p)
}

fn features(images: &[Array3<f32>]) -> Array2<f64> {
    let rows: Vec<Vec<f64>> = images.iter().map(texture_features).collect();
    Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j])
}

#[derive(Serialize)]
struct JpegEvaluation {
    qf: u8,
    patches: usize,
    psnr_compressed: f64,
    psnr_restored: f64,
    ssim_compressed: f64,
    ssim_restored: f64,
    fcd_compressed: f64,
    fcd_restored: f64,
}

#[derive(Serialize)]
struct TearEvaluation {
    patches: usize,
    count_relerr_torn: f64,
    count_relerr_restored: f64,
    occupancy_relerr_torn: f64,
    occupancy_relerr_restored: f64,
}

#[derive(Serialize)]
struct Evaluation {
    metrics: MetricReport,
    regression_linear_fit: [f64; 2],
    jpeg: Option<JpegEvaluation>,
    tear: Option<TearEvaluation>,
}

fn relerr(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.max(1.0)
}

pub fn evaluate(cfg: &RunConfig, model: &Path, data: &Path, out: &Path) -> Result<()> {
    let (bundle, sched, _) = load_model(model)?;
    let ds = load_dataset(data, |_| true)?;
    check_patch(&bundle, &ds)?;
    let (train, test) = split_latents(&bundle, &ds)?;
    let cls = classification_probe(&train, &test, &probe_options(cfg))?;
    let (lr, lt) = regression_probe(&train, &test)?;
    let (hr, ht) = head_position_mse(&bundle, &test)?;
    let mut metrics = MetricReport {
        mse_r: Some(hr),
        mse_theta: Some(ht),
        ..MetricReport::default()
    }
    .with_classification(&cls);

    let clean: HashMap<Key, &PatchRecord> = ds
        .entries
        .iter()
        .filter(|(e, _)| e.artifact_kind == CLEAN)
        .map(|(e, r)| (key(e), r))
        .collect();
    let paired = |kind: &str| -> Vec<(&IndexEntry, &PatchRecord, &PatchRecord)> {
        ds.entries
            .iter()
            .filter(|(e, _)| e.artifact_kind == kind)
            .filter_map(|(e, r)| clean.get(&key(e)).map(|c| (e, r, *c)))
            .collect()
    };

    let jcfg = cfg.restore.jpeg();
    let jpeg_pairs = paired(&format!("jpeg_q{}", jcfg.qf));
    let jpeg = if jpeg_pairs.is_empty() {
        None
    } else {
        let compressed: Vec<Array3<f32>> = jpeg_pairs.iter().map(|(_, r, _)| r.image.clone()).collect();
        let originals: Vec<Array3<f32>> = jpeg_pairs.iter().map(|(_, _, c)| c.image.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.restore.seed);
        let restored_batch = restore_jpeg_batch(&stack(&compressed), &jcfg, &bundle, &sched, &mut rng)?;
        let restored: Vec<Array3<f32>> = restored_batch.outer_iter().map(|v| v.to_owned()).collect();
        let mean_fid = |xs: &[Array3<f32>]| -> Result<(f64, f64)> {
            let mut acc = (0.0, 0.0);
            for (x, o) in xs.iter().zip(&originals) {
                let (p, s) = image_fidelity(x, o, 1.0)?;
                acc.0 += p;
                acc.1 += s;
            }
            Ok((acc.0 / xs.len() as f64, acc.1 / xs.len() as f64))
        };
        let (pc, sc) = mean_fid(&compressed)?;
        let (pr, sr) = mean_fid(&restored)?;
        let fo = features(&originals);
        let fcd_c = frechet_feature_distance(&features(&compressed), &fo)?;
        let fcd_r = frechet_feature_distance(&features(&restored), &fo)?;
        metrics.psnr = Some(pr);
        metrics.ssim = Some(sr);
        metrics.fcd = Some(fcd_r);
        Some(JpegEvaluation {
            qf: jcfg.qf,
            patches: restored.len(),
            psnr_compressed: pc,
            psnr_restored: pr,
            ssim_compressed: sc,
            ssim_restored: sr,
            fcd_compressed: fcd_c,
            fcd_restored: fcd_r,
        })
    };

    let tear_pairs = paired("tear");
    let tear = if tear_pairs.is_empty() {
        None
    } else {
        let mut sums = [0.0f64; 4];
        for (e, torn, orig) in &tear_pairs {
            let mask = ds
                .mask_for(e)?
                .map(ArtifactMask)
                .unwrap_or_else(|| detect_tear_mask(&torn.image, cfg.restore.whiteness_threshold));
            let seed = cfg.restore.seed ^ ((e.section_id as u64) << 32 | (e.y_p as u64) << 16 | e.x_p as u64);
            let (restored, _) = restore_tear_roi(&torn.image, &mask, &bundle, &sched, cfg.restore.tear_steps, seed)?;
            let o = blob_stats(&orig.image, DEFAULT_BLOB_THRESHOLD);
            let t = blob_stats(&torn.image, DEFAULT_BLOB_THRESHOLD);
            let r = blob_stats(&restored, DEFAULT_BLOB_THRESHOLD);
            sums[0] += relerr(t.count as f64, o.count as f64);
            sums[1] += relerr(r.count as f64, o.count as f64);
            sums[2] += (t.occupancy - o.occupancy).abs() / o.occupancy.max(1e-3);
            sums[3] += (r.occupancy - o.occupancy).abs() / o.occupancy.max(1e-3);
        }
        let n = tear_pairs.len() as f64;
        metrics.cell_count_relerr = Some(sums[1] / n);
        metrics.cell_occupancy_relerr = Some(sums[3] / n);
        Some(TearEvaluation {
            patches: tear_pairs.len(),
            count_relerr_torn: sums[0] / n,
            count_relerr_restored: sums[1] / n,
            occupancy_relerr_torn: sums[2] / n,
            occupancy_relerr_restored: sums[3] / n,
        })
    };

    write_json(&out.join("metrics.json"), &metrics)?;
    write_json(
        &out.join("evaluation.json"),
        &Evaluation {
            metrics: metrics.clone(),
            regression_linear_fit: [lr, lt],
            jpeg,
            tear,
        },
    )?;
    Ok(())
}

pub fn plot_latents(_cfg: &RunConfig, model: &Path, data: &Path, out: &Path) -> Result<()> {
    let (bundle, _, _) = load_model(model)?;
    let ds = load_dataset(data, |e| e.artifact_kind == CLEAN && !is_training_section(e.section_id))?;
    check_patch(&bundle, &ds)?;
    let lat = encode_records(&bundle, &ds.records(CLEAN, false))?;
    let proj = project_latents_2d(&lat)?;
    let regions: Vec<usize> = lat.iter().map(|l| l.region).collect();
    write_json(&out.join("projection.json"), &proj)?;
    fs::write(
        out.join("latents.svg"),
        plot::latent_scatter(&proj, &regions, &ds.manifest.config.region_names()),
    )?;
    Ok(())
}
