//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=3,4` restricts the run; `ACCEPTANCE_CACHE=<dir>` keeps
//! trained checkpoints between runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use ndarray::{s, Array1, Array2, Array3, Array4, Axis, Ix1, Ix3};
use posdiffae::datagen::{generate_section, simulate_jpeg, simulate_tear, PatchRecord, RegionSpec, SyntheticSectionSpec};
use posdiffae::dataset::{build_sections, write_dataset, Dataset, DatasetConfig};
use posdiffae::evaluation::{
    blob_stats, classification_metrics, classification_probe, encode_records, frechet_feature_distance,
    head_position_mse, image_fidelity, regression_probe, texture_features, LabeledLatent, ProbeOptions,
    DEFAULT_BLOB_THRESHOLD, PSNR_CAP_DB,
};
use posdiffae::geometry::{patch_position, radial_angle, radial_distance, SectionGeometry};
use posdiffae::imageio::to_model_range;
use posdiffae::networks::checkpoint::{self, Manifest};
use posdiffae::networks::{LatentCode, ModelBundle, NetConfig};
use posdiffae::restoration::{inpaint_window, restore_jpeg_batch, restore_tear_roi, ArtifactMask, JpegRestoreConfig, TEAR_STEPS};
use posdiffae::schedule::{forward_noise, gaussian_like, posterior_step, terminal_step, NoiseSchedule};
use posdiffae::training::{draw_noise, gradient_check, train_with, Batch, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Result<Verdict> {
    let s = NoiseSchedule::standard();
    let n = 200_000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    let mut ok = true;
    for &t in &[1usize, 10, 250, 500, 999, 1000] {
        for &x0v in &[-0.8f64, 0.0, 0.6] {
            let x0 = Array1::from_elem(n, x0v);
            let eps: Array1<f64> = gaussian_like(Ix1(n), &mut rng);
            let xt = forward_noise(&x0, t, eps, &s)?.x_t;
            let ab = s.alpha_bar(t);
            let sd = (1.0 - ab).sqrt();
            // Mean within 4 standard errors, variance within 2 %.
            let z_mean = (xt.mean().unwrap() - ab.sqrt() * x0v).abs() / (sd / (n as f64).sqrt());
            let rel_var = (xt.var(1.0) - (1.0 - ab)).abs() / (1.0 - ab);
            worst_mean = worst_mean.max(z_mean);
            worst_var = worst_var.max(rel_var);
            ok &= z_mean < 4.0 && rel_var < 0.02;
        }
    }
    let x0: Array3<f64> = gaussian_like(Ix3(3, 16, 16), &mut rng).mapv(|v: f64| v.tanh());
    let eps = gaussian_like(Ix3(3, 16, 16), &mut rng);
    let mut x = forward_noise(&x0, s.steps(), eps, &s)?.x_t;
    for t in (2..=s.steps()).rev() {
        x = posterior_step(&x, &x0, t, &s)?;
    }
    let err = (&terminal_step(&x, &x0)? - &x0).fold(0.0f64, |a, v| a.max(v.abs()));
    verdict(
        ok && err < 1e-5,
        format!("marginal mean worst {worst_mean:.2} s.e., variance worst {:.3}%; round trip max error {err:.1e}", 100.0 * worst_var),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Result<Verdict> {
    let bundle = ModelBundle::<f64>::new(NetConfig::tiny(), 2)?;
    let params = bundle.num_params();
    let c = &bundle.config;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let records: Vec<PatchRecord> = (0..4)
        .map(|i| PatchRecord {
            image: Array3::from_shape_fn((c.channels, c.height, c.width), |_| rng.random_range(0.0..1.0)),
            position: posdiffae::geometry::PatchPosition {
                corner: (i, i),
                r0: rng.random_range(0.0..1.0),
                theta0: rng.random_range(0.0..360.0),
            },
            region: 0,
            section_id: 0,
        })
        .collect();
    let batch = Batch::from_records(&records)?;
    let draw = draw_noise(batch.x0.dim(), 1000, &mut rng);
    let rep = gradient_check(
        &bundle,
        &batch,
        &draw,
        &NoiseSchedule::standard(),
        &TrainConfig::default(),
        400,
        1e-2,
        1e-8,
        |_| true,
        &mut rng,
    )?;
    verdict(
        params <= 50_000 && rep.max_rel_error < 1e-3,
        format!(
            "{params} parameters, {} probes, max relative error {:.2e} ({})",
            rep.checked, rep.max_rel_error, rep.worst_param
        ),
    )
}

// ---------------------------------------------------------------- shared training

struct Study {
    sched: NoiseSchedule,
    train: Vec<PatchRecord>,
    test: Vec<PatchRecord>,
    untrained: ModelBundle<f32>,
    posdiffae: Option<ModelBundle<f32>>,
    diffae: Option<ModelBundle<f32>>,
}

impl Study {
    fn new() -> Result<Self> {
        let sections = build_sections(&DatasetConfig::default())?;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for s in &sections {
            if posdiffae::datagen::is_training_section(s.section.geometry.section_id) {
                train.extend(s.records.iter().cloned());
            } else {
                test.extend(s.records.iter().cloned());
            }
        }
        Ok(Self {
            sched: NoiseSchedule::standard(),
            train,
            test,
            untrained: ModelBundle::new(NetConfig::desk(), 0)?,
            posdiffae: None,
            diffae: None,
        })
    }

    fn fit(&self, cfg: &TrainConfig, tag: &str) -> Result<ModelBundle<f32>> {
        let cache = std::env::var_os("ACCEPTANCE_CACHE").map(PathBuf::from);
        let path = cache.as_ref().map(|d| d.join(format!("{tag}.safetensors")));
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            eprintln!("  loading cached {tag} from {}", p.display());
            return Ok(checkpoint::load(p)?.0);
        }
        let start = Instant::now();
        let out = train_with(self.untrained.clone(), &self.train, &self.sched, cfg, |e, l| {
            eprintln!(
                "  {tag} epoch {e}: mse {:.4} r {:.4} theta {:.4} ({:.0}s)",
                l.l_mse,
                l.l_r,
                l.l_theta,
                start.elapsed().as_secs_f64()
            );
        })?;
        if let (Some(d), Some(p)) = (cache, path) {
            fs::create_dir_all(d)?;
            let m = Manifest {
                net: out.bundle.config.clone(),
                beta_start: posdiffae::schedule::DEFAULT_BETA_START,
                beta_end: posdiffae::schedule::DEFAULT_BETA_END,
                lambdas: [cfg.lambda1, cfg.lambda2, cfg.lambda3],
                num_params: out.bundle.num_params(),
            };
            checkpoint::save(&out.bundle, &m, &p)?;
        }
        Ok(out.bundle)
    }

    fn posdiffae(&mut self) -> Result<&ModelBundle<f32>> {
        if self.posdiffae.is_none() {
            self.posdiffae = Some(self.fit(&TrainConfig::default(), "posdiffae")?);
        }
        Ok(self.posdiffae.as_ref().unwrap())
    }

    fn diffae(&mut self) -> Result<&ModelBundle<f32>> {
        if self.diffae.is_none() {
            let cfg = TrainConfig {
                lambda2: 0.0,
                lambda3: 0.0,
                ..TrainConfig::default()
            };
            self.diffae = Some(self.fit(&cfg, "diffae")?);
        }
        Ok(self.diffae.as_ref().unwrap())
    }

    fn latents(&self, b: &ModelBundle<f32>) -> Result<(Vec<LabeledLatent>, Vec<LabeledLatent>)> {
        Ok((encode_records(b, &self.train)?, encode_records(b, &self.test)?))
    }
}

// ---------------------------------------------------------------- 3

fn criterion_3(st: &mut Study) -> Result<Verdict> {
    let (_, test0) = st.latents(&st.untrained)?;
    let (r0, t0) = head_position_mse(&st.untrained, &test0)?;
    let trained = st.posdiffae()?.clone();
    let (_, test1) = st.latents(&trained)?;
    let (r1, t1) = head_position_mse(&trained, &test1)?;
    let (fr, ft) = (r0 / r1, t0 / t1);
    verdict(
        st.train.len() >= 2000 && fr >= 5.0 && ft >= 5.0,
        format!(
            "{} train patches; head mse r {r1:.4} vs untrained {r0:.4} ({fr:.1}x), theta {t1:.4} vs {t0:.4} ({ft:.1}x)",
            st.train.len()
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4(st: &mut Study) -> Result<Verdict> {
    let opts = ProbeOptions::default();
    let (a, b) = st.latents(&st.untrained)?;
    let acc0 = classification_probe(&a, &b, &opts)?.accuracy;
    let trained = st.posdiffae()?.clone();
    let (a, b) = st.latents(&trained)?;
    let rep = classification_probe(&a, &b, &opts)?;
    verdict(
        rep.accuracy >= 0.90 && acc0 <= 0.35,
        format!(
            "balanced held-out accuracy {:.3} (kappa {:.3}) vs untrained {acc0:.3}",
            rep.accuracy, rep.kappa
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5(st: &mut Study) -> Result<Verdict> {
    let pos = st.posdiffae()?.clone();
    let (_, test) = st.latents(&pos)?;
    let (pr, pt) = head_position_mse(&pos, &test)?;
    let diff = st.diffae()?.clone();
    let (a, b) = st.latents(&diff)?;
    let (dr, dt) = regression_probe(&a, &b)?;
    let (p, d) = (0.5 * (pr + pt), 0.5 * (dr + dt));
    let gain = 1.0 - p / d;
    verdict(
        gain >= 0.20,
        format!(
            "position mse {p:.4} (heads: r {pr:.4}, theta {pt:.4}) vs linear fit on position-free latents {d:.4} (r {dr:.4}, theta {dt:.4}): {:.1}% lower",
            100.0 * gain
        ),
    )
}

// ---------------------------------------------------------------- 6

/// Two rows of three windows over homogeneous texture; the bottom middle window is torn.
fn tear_trial(bundle: &ModelBundle<f32>, sched: &NoiseSchedule, region: &RegionSpec, seed: u64) -> Result<[f64; 4]> {
    let (ph, pw) = (bundle.config.height, bundle.config.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = SyntheticSectionSpec {
        size: (256, 256),
        radius: 120.0,
        regions: vec![RegionSpec {
            band: (0.0, 1.0),
            ..region.clone()
        }],
        seed,
        rotation: 0.0,
        section_id: 0,
    };
    let section = generate_section(&spec)?.image;
    // Keep the whole ROI inside the disk.
    let (y0, x0) = loop {
        let y = rng.random_range(20..256 - 2 * ph - 20);
        let x = rng.random_range(20..256 - 3 * pw - 20);
        let far = [(y, x), (y + 2 * ph, x), (y, x + 3 * pw), (y + 2 * ph, x + 3 * pw)]
            .iter()
            .map(|&(a, b)| ((a as f64 - 127.5).powi(2) + (b as f64 - 127.5).powi(2)).sqrt())
            .fold(0.0, f64::max);
        if far < 116.0 {
            break (y, x);
        }
    };
    let clean = section.slice(s![.., y0..y0 + 2 * ph, x0..x0 + 3 * pw]).to_owned();
    let target = |img: &Array3<f32>| img.slice(s![.., ph..2 * ph, pw..2 * pw]).to_owned();
    let (torn_win, mask_win) = simulate_tear(&target(&clean), 0.25, &mut rng)?;
    let mut torn = clean.clone();
    torn.slice_mut(s![.., ph..2 * ph, pw..2 * pw]).assign(&torn_win);
    let mut mask = Array2::from_elem((2 * ph, 3 * pw), false);
    mask.slice_mut(s![ph..2 * ph, pw..2 * pw]).assign(&mask_win);
    let (restored, _) = restore_tear_roi(&torn, &ArtifactMask(mask), bundle, sched, TEAR_STEPS, seed)?;

    let count = |img: &Array3<f32>| blob_stats(img, DEFAULT_BLOB_THRESHOLD).count as f64;
    let neighbours: Vec<f64> = [(0, 0), (0, 1), (0, 2), (1, 0), (1, 2)]
        .iter()
        .map(|&(r, c)| count(&clean.slice(s![.., r * ph..(r + 1) * ph, c * pw..(c + 1) * pw]).to_owned()))
        .collect();
    let mean = neighbours.iter().sum::<f64>() / neighbours.len() as f64;
    Ok([mean, count(&target(&restored)), count(&torn_win), count(&target(&clean))])
}

fn criterion_6(st: &mut Study) -> Result<Verdict> {
    let bundle = st.posdiffae()?.clone();
    let sched = st.sched.clone();
    let (ph, pw) = (bundle.config.height, bundle.config.width);

    // Exactness of known pixels and identity under an empty mask.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut exact = 0;
    for trial in 0..100 {
        let rec = &st.test[rng.random_range(0..st.test.len())];
        let fraction = rng.random_range(0.02..0.6);
        let mask = ArtifactMask(Array2::from_shape_fn((ph, pw), |_| rng.random_bool(fraction)));
        let x = to_model_range(&rec.image);
        let z = bundle.encode(&x)?;
        let out = inpaint_window(&x, &mask, &z, &bundle, &sched, 10, &mut ChaCha8Rng::seed_from_u64(trial))?;
        let kept = ndarray::Zip::from(out.lanes(Axis(0)))
            .and(x.lanes(Axis(0)))
            .and(&mask.0)
            .fold(true, |acc, o, i, &m| acc && (m || o == i));
        exact += kept as usize;
    }
    let rec = &st.test[0];
    let empty = ArtifactMask::empty(ph, pw);
    let x = to_model_range(&rec.image);
    let z: LatentCode<f32> = bundle.encode(&x)?;
    let identity = inpaint_window(&x, &empty, &z, &bundle, &sched, TEAR_STEPS, &mut rng)? == x
        && restore_tear_roi(&rec.image, &empty, &bundle, &sched, TEAR_STEPS, 0)?.0 == rec.image;

    // Blob counts on torn and restored windows against clean neighbours.
    let regions = RegionSpec::default_bands();
    let within = |c: f64, m: f64| (c - m).abs() <= 0.5 * m;
    let mut hits = [0usize; 3];
    let trials = 100;
    for k in 0..trials {
        let [mean, restored, torn, clean] = tear_trial(&bundle, &sched, &regions[k % regions.len()], 600 + k as u64)?;
        hits[0] += within(restored, mean) as usize;
        hits[1] += within(torn, mean) as usize;
        hits[2] += within(clean, mean) as usize;
    }
    let rate = hits[0] as f64 / trials as f64;
    verdict(
        exact == 100 && identity && rate >= 0.8,
        format!(
            "known pixels exact {exact}/100, empty mask identity {identity}; blob count within 50% of neighbours: restored {}/{trials}, torn {}/{trials}, clean {}/{trials}",
            hits[0], hits[1], hits[2]
        ),
    )
}

// ---------------------------------------------------------------- 7

fn stack(images: &[Array3<f32>]) -> Array4<f32> {
    let (c, h, w) = images[0].dim();
    let mut x = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        x.index_axis_mut(Axis(0), i).assign(img);
    }
    x
}

fn features(images: &[Array3<f32>]) -> Array2<f64> {
    let rows: Vec<Vec<f64>> = images.iter().map(texture_features).collect();
    Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j])
}

fn criterion_7(st: &mut Study) -> Result<Verdict> {
    let bundle = st.posdiffae()?.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut idx: Vec<usize> = (0..st.test.len()).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    let clean: Vec<Array3<f32>> = idx[..200].iter().map(|&i| st.test[i].image.clone()).collect();
    let compressed = clean.iter().map(|c| simulate_jpeg(c, 5)).collect::<posdiffae::Result<Vec<_>>>()?;
    let cfg = JpegRestoreConfig::for_qf(5);
    let restored: Vec<Array3<f32>> = restore_jpeg_batch(&stack(&compressed), &cfg, &bundle, &st.sched, &mut rng)?
        .outer_iter()
        .map(|v| v.to_owned())
        .collect();
    let psnr = |xs: &[Array3<f32>]| -> Result<f64> {
        let mut acc = 0.0;
        for (x, c) in xs.iter().zip(&clean) {
            acc += image_fidelity(x, c, 1.0)?.0;
        }
        Ok(acc / xs.len() as f64)
    };
    let (pc, pr) = (psnr(&compressed)?, psnr(&restored)?);
    let fc = features(&clean);
    let (dc, dr) = (
        frechet_feature_distance(&features(&compressed), &fc)?,
        frechet_feature_distance(&features(&restored), &fc)?,
    );
    verdict(
        pr > pc && dr < dc,
        format!(
            "QF 5, T'={} N''={}: psnr {pc:.2} -> {pr:.2} dB, fcd {dc:.4} -> {dr:.4}",
            cfg.t_prime, cfg.n_steps
        ),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Result<Verdict> {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let close = |a: f64, b: f64, tol: f64| (a - b).abs() <= tol;

    let truth = [0, 1, 1, 1, 0, 0];
    let pred = [0, 0, 1, 1, 1, 0];
    let r = classification_metrics(&pred, &truth)?;
    checks.push(("kappa 1/3", close(r.kappa, 1.0 / 3.0, 1e-8)));
    checks.push(("precision 2/3", close(r.precision[0], 2.0 / 3.0, 1e-8) && close(r.precision[1], 2.0 / 3.0, 1e-8)));
    checks.push(("recall 2/3", close(r.recall[0], 2.0 / 3.0, 1e-8) && close(r.recall[1], 2.0 / 3.0, 1e-8)));
    let r = classification_metrics(&[0, 0, 0, 0], &[0, 0, 1, 1])?;
    checks.push(("constant prediction", close(r.accuracy, 0.5, 1e-8) && close(r.kappa, 0.0, 1e-8)));
    let r = classification_metrics(&truth, &truth)?;
    checks.push(("perfect", close(r.accuracy, 1.0, 1e-8) && close(r.kappa, 1.0, 1e-8)));

    let zeros = Array3::<f32>::zeros((3, 16, 16));
    let ones = Array3::<f32>::ones((3, 16, 16));
    checks.push(("psnr full range", close(image_fidelity(&zeros, &ones, 1.0)?.0, 0.0, 1e-8)));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Array3::from_shape_fn((3, 24, 24), |_| rng.random_range(0.2f32..0.8));
    let (p, s) = image_fidelity(&x, &x, 1.0)?;
    checks.push(("identical images", p == PSNR_CAP_DB && close(s, 1.0, 1e-3)));
    let y = x.mapv(|v| v + rng.random_range(-1e-3f32..1e-3));
    checks.push(("tiny noise ssim", image_fidelity(&x, &y, 1.0)?.1 > 0.99));
    // PSNR of a uniform offset d on range 1: -20 log10 d.
    let shifted = x.mapv(|v| v + 0.1);
    checks.push(("psnr offset", close(image_fidelity(&x, &shifted, 1.0)?.0, 20.0, 1e-4)));

    let a = Array2::from_shape_vec((4, 1), vec![-1.5, -0.5, 0.5, 1.5])?;
    let b = a.mapv(|v| v + 1.0);
    checks.push(("frechet 1-d shift", close(frechet_feature_distance(&a, &b)?, 1.0, 1e-8)));
    let wide = a.mapv(|v| 2.0 * v);
    // Same mean, standard deviation doubled: (s1 - s2)^2 = var(a).
    let var_a = a.column(0).var(1.0);
    checks.push(("frechet 1-d scale", close(frechet_feature_distance(&a, &wide)?, var_a, 1e-8)));
    checks.push(("frechet identical", close(frechet_feature_distance(&a, &a)?, 0.0, 1e-8)));

    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    verdict(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} hand values matched", checks.len())
        } else {
            format!("failed: {}", failed.join(", "))
        },
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Result<Verdict> {
    let g = SectionGeometry {
        centroid: (100.0, 100.0),
        r_max: 50.0,
        alignment_angle: 0.0,
        section_id: 0,
    };
    let dist = (radial_distance((103.0, 104.0), &g) - 0.1).abs() < 1e-12;
    let g10 = SectionGeometry {
        alignment_angle: 10.0,
        ..g.clone()
    };
    let t = 355f64.to_radians();
    let wrap = (radial_angle((100.0 + 10.0 * t.cos(), 100.0 + 10.0 * t.sin()), &g10)? - 5.0).abs() < 1e-9;

    let cfg = DatasetConfig::default();
    let tmp = tempfile::tempdir()?;
    write_dataset(&cfg, tmp.path())?;
    let ds = Dataset::load(tmp.path())?;
    let mut worst_rot = 0.0f64;
    for s in &ds.manifest.sections {
        let est = ds.geometry(s.section_id).context("geometry")?.alignment_angle;
        worst_rot = worst_rot.max((est - s.rotation).abs());
    }
    let mut mismatches = 0;
    for (e, _) in &ds.entries {
        let p = patch_position((e.x_p, e.y_p), ds.geometry(e.section_id).context("geometry")?);
        if p.r0.to_bits() != e.r0.to_bits() || p.theta0.to_bits() != e.theta0.to_bits() {
            mismatches += 1;
        }
    }
    let rot_ok = worst_rot <= 0.5 * cfg.alignment_step + 1e-9;
    verdict(
        dist && wrap && rot_ok && mismatches == 0 && !ds.entries.is_empty(),
        format!(
            "3-4-5 {dist}, wraparound {wrap}, worst rotation error {worst_rot:.2} deg (step {}), {mismatches} of {} stored positions differ",
            cfg.alignment_step,
            ds.entries.len()
        ),
    )
}

// ---------------------------------------------------------------- 10

fn cli(args: &[&str]) -> Result<String> {
    let o = Command::new(env!("CARGO_BIN_EXE_posdiffae"))
        .args(args)
        .env_remove("POSDIFFAE_OUT")
        .env("RUST_LOG", "warn")
        .output()?;
    ensure!(
        o.status.success(),
        "{args:?}: {}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn criterion_10() -> Result<Verdict> {
    let tmp = tempfile::tempdir()?;
    let root = tmp.path();
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();
    let small = [
        "--set", "data.sections=4", "--set", "data.size=256", "--set", "data.radius=120", "--set", "data.patch=16",
        "--set", "data.stride=8", "--set", "data.jpeg_qf=[5]", "--set", "data.tear_fraction=0.15",
    ];
    let mut gen = vec!["gen-data", "--seed", "10", "--out"];
    let gen_out = p("gen-data");
    gen.push(&gen_out);
    gen.extend(small);
    cli(&gen)?;
    let data = p("gen-data/dataset");
    let train_out = p("train");
    cli(&["train", "--data", &data, "--out", &train_out, "--set", "model.preset=tiny", "--set", "train.epochs=2"])?;
    let model = p("train/model.safetensors");
    for cmd in ["encode", "classify", "regress", "evaluate", "plot-latents"] {
        cli(&[cmd, "--model", &model, "--data", &data, "--out", &p(cmd)])?;
    }
    let torn = Path::new(&data).join("section_001/patches/p00020_tear.png");
    let mask = Path::new(&data).join("section_001/patches/p00020_tear_mask.png");
    cli(&[
        "restore-tear", "--model", &model, "--input", &torn.to_string_lossy(), "--mask", &mask.to_string_lossy(),
        "--out", &p("restore-tear"),
    ])?;
    let jdir = root.join("jpeg_inputs");
    fs::create_dir_all(&jdir)?;
    for i in 0..4 {
        let name = format!("p{i:05}_jpeg_q5.png");
        fs::copy(Path::new(&data).join("section_001/patches").join(&name), jdir.join(&name))?;
    }
    cli(&["restore-jpeg", "--model", &model, "--input", &jdir.to_string_lossy(), "--out", &p("restore-jpeg")])?;

    let commands = [
        "gen-data", "train", "encode", "classify", "regress", "evaluate", "plot-latents", "restore-tear", "restore-jpeg",
    ];
    let mut same = Vec::new();
    for cmd in commands {
        let manifest = root.join(cmd).join("manifest.json");
        let out = cli(&["replay", &manifest.to_string_lossy(), "--out", &p(&format!("replay-{cmd}"))])?;
        if out.contains("identical") {
            same.push(cmd);
        }
    }
    verdict(
        same.len() == commands.len(),
        format!("{}/{} commands replayed bit-identically", same.len(), commands.len()),
    )
}

// ---------------------------------------------------------------- driver

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut study: Option<Study> = None;
    let mut failures = 0;
    for n in 1..=10 {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let result = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            8 => criterion_8(),
            9 => criterion_9(),
            10 => criterion_10(),
            _ => {
                if study.is_none() {
                    match Study::new() {
                        Ok(s) => study = Some(s),
                        Err(e) => {
                            failures += 1;
                            println!("criterion {n:>2}: FAIL  setup error: {e:#}");
                            continue;
                        }
                    }
                }
                let st = study.as_mut().unwrap();
                match n {
                    3 => criterion_3(st),
                    4 => criterion_4(st),
                    5 => criterion_5(st),
                    6 => criterion_6(st),
                    _ => criterion_7(st),
                }
            }
        };
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(v) => {
                failures += usize::from(!v.pass);
                println!(
                    "criterion {n:>2}: {}  {} [{secs:.0}s]",
                    if v.pass { "PASS" } else { "FAIL" },
                    v.detail
                );
            }
            Err(e) => {
                failures += 1;
                println!("criterion {n:>2}: FAIL  error: {e:#} [{secs:.0}s]");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
