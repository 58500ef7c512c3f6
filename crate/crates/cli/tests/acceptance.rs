//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use acanet::data::{
    apply_crop, generate_synthetic_fixture, plan_crop, BBox, CropWindow, RgbImage,
};
use acanet::losses::{
    binary_cross_entropy, dice_loss, one_hot_encode, DiceConfig, LossWeights, Reduction,
};
use acanet::metrics::{compute_report, ConfusionCounts};
use acanet::model::fuse_features;
use acanet::nn::conv::Init;
use acanet::nn::Conv2d;
use acanet::trainer::{
    early_stop_check, evaluate, gradient_check, lr_schedule_step, perturb_batch_norm, train,
    CombinedObjective, GradCheckConfig, TrainConfig, TrainState,
};
use acanet::data::{render_fixture, stack_images, AugmentationConfig, Normalization};
use acanet::losses::LossConfig;
use acanet::{Model, ModelConfig, SegmentationMap, Tensor, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// 1x1 convolution evaluated pixel by pixel.
fn pointwise(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    let wt = &conv.weight.value;
    let co = wt.shape()[0];
    Tensor::from_fn([n, co, h, w], |[b, o, y, xx]| {
        let mut acc = conv.bias.as_ref().map_or(0.0, |p| p.value.data()[o]);
        for i in 0..c {
            acc += wt.at(o, i, 0, 0) * x.at(b, i, y, xx);
        }
        acc
    })
}

fn fusion_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut init = ChaCha8Rng::seed_from_u64(2);
    for case in 0..20 {
        let (c, h, w) = if case == 0 { (4, 5, 5) } else { (2, 3, 3) };
        let fh = Conv2d::<f64>::new(c, c, 1, 1, 0, true, Init::UniformFanIn, &mut init);
        let fo = Conv2d::<f64>::new(c, c, 1, 1, 0, true, Init::UniformFanIn, &mut init);
        let phi = Tensor::from_fn([2, c, h, w], |_| rng.gen_range(-2.0..2.0));
        let zeros = Tensor::zeros([2, 1, h, w]);
        let ones = Tensor::full([2, 1, h, w], 1.0);
        let out = fuse_features(&phi, &zeros, &zeros, &fh, &fo).map_err(err)?;
        ensure(out.data() == phi.data(), || format!("case {case}: zero masks changed the features"))?;

        let ph = pointwise(&fh, &phi);
        let po = pointwise(&fo, &phi);
        let out = fuse_features(&phi, &ones, &ones, &fh, &fo).map_err(err)?;
        for i in 0..phi.len() {
            let expect = phi.data()[i] + ph.data()[i] + po.data()[i];
            worst = worst.max((out.data()[i] - expect).abs());
        }

        let mh = Tensor::from_fn([2, 1, h, w], |_| rng.gen_range(0.0..1.0));
        let mo = Tensor::from_fn([2, 1, h, w], |_| rng.gen_range(0.0..1.0));
        let out = fuse_features(&phi, &mh, &mo, &fh, &fo).map_err(err)?;
        for b in 0..2 {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let expect = phi.at(b, ch, y, x)
                            + ph.at(b, ch, y, x) * mh.at(b, 0, y, x)
                            + po.at(b, ch, y, x) * mo.at(b, 0, y, x);
                        worst = worst.max((out.at(b, ch, y, x) - expect).abs());
                    }
                }
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max deviation {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("max deviation {worst:.1e}"))
}

fn loss_oracles() -> Outcome {
    let start = Instant::now();
    let n = 16;
    let target = one_hot_encode(&SegmentationMap::filled(n, 1, 0), 2).map_err(err)?;
    let dice = dice_loss(&Tensor::full([1, 2, 1, n], 0.5f64), &target, &DiceConfig::default()).map_err(err)?;
    ensure((dice - 2.0 / 3.0).abs() <= 1e-6, || format!("dice {dice}"))?;

    let pred = Tensor::full([2, 1, 4, 4], 0.5f64);
    let v = Tensor::from_fn([2, 1, 4, 4], |[b, _, y, x]| ((b + x + y) % 2) as f64);
    let bce = binary_cross_entropy(&pred, &v, Reduction::MeanAll).map_err(err)?;
    ensure((bce - std::f64::consts::LN_2).abs() <= 1e-9, || format!("bce {bce}"))?;

    let w = LossWeights::new(2.0, 0.5).map_err(err)?;
    let total = w.combine(0.4f64, 0.2, 0.6);
    ensure((total - 1.1).abs() <= 1e-12, || format!("combined {total}"))?;
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("dice {dice:.9}, bce {bce:.12}, combined {total:.15}"))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut model = Model::<f64>::build(ModelConfig::miniature(Variant::Acanet, 32)).map_err(err)?;
    perturb_batch_norm(&mut model, 0);
    let fixtures: Vec<_> = (0..2).map(|i| render_fixture(32, 11, i)).collect::<Result<_, _>>().map_err(err)?;
    let images: Vec<&RgbImage> = fixtures.iter().map(|f| &f.image).collect();
    let masks: Vec<SegmentationMap> = fixtures.iter().map(|f| f.mask.clone()).collect();
    let x = stack_images::<f64>(&images, &Normalization::default()).map_err(err)?;
    let objective = CombinedObjective::new(&masks, 4, LossConfig::default()).map_err(err)?;
    let cfg = GradCheckConfig::default();
    let report = gradient_check(&mut model, &x, &objective, &cfg).map_err(err)?;
    let fusion = report.max_fusion_relative_error();
    ensure(report.fusion_entries() >= 16, || "too few fusion entries sampled".into())?;
    ensure(fusion < 1e-4, || format!("fusion max relative error {fusion:e}"))?;

    model.set_fusion_backward_fault(true);
    let faulty = gradient_check(&mut model, &x, &objective, &cfg).map_err(err)?;
    ensure(faulty.max_fusion_relative_error() > 1e-4, || "corrupted backward went unnoticed".into())?;
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "fusion filters {fusion:.1e} over {} entries (all {} sampled entries: {:.1e}); corrupted backward {:.2}",
        report.fusion_entries(),
        report.entries.len(),
        report.max_relative_error,
        faulty.max_fusion_relative_error()
    ))
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, side, pairs) = (4usize, 8usize, 100usize);
    let mut counts = ConfusionCounts::new(c);
    let mut tp = vec![0u64; c];
    let mut fp = vec![0u64; c];
    let mut fn_ = vec![0u64; c];
    for _ in 0..pairs {
        let pred: Vec<u8> = (0..side * side).map(|_| rng.gen_range(0..c as u8)).collect();
        let gt: Vec<u8> = (0..side * side).map(|_| rng.gen_range(0..c as u8)).collect();
        for class in 0..c as u8 {
            for y in 0..side {
                for x in 0..side {
                    let (p, g) = (pred[y * side + x] == class, gt[y * side + x] == class);
                    let k = class as usize;
                    tp[k] += u64::from(p && g);
                    fp[k] += u64::from(p && !g);
                    fn_[k] += u64::from(!p && g);
                }
            }
        }
        let p = SegmentationMap::new(side, side, pred).map_err(err)?;
        let g = SegmentationMap::new(side, side, gt).map_err(err)?;
        counts.update(&p, &g).map_err(err)?;
    }
    let report = compute_report(&counts);
    for k in 0..c {
        let got = counts.class(k);
        ensure((got.tp, got.fp, got.fn_) == (tp[k], fp[k], fn_[k]), || format!("class {k} counts differ"))?;
        let p = tp[k] as f64 / (tp[k] + fp[k]) as f64;
        let r = tp[k] as f64 / (tp[k] + fn_[k]) as f64;
        let j = tp[k] as f64 / (tp[k] + fp[k] + fn_[k]) as f64;
        let m = &report.classes[k];
        let (rp, rr, rj) = (m.precision.ok_or("P undefined")?, m.recall.ok_or("R undefined")?, m.jaccard.ok_or("J undefined")?);
        ensure((rp - p).abs() <= 1e-12 && (rr - r).abs() <= 1e-12 && (rj - j).abs() <= 1e-12, || format!("class {k} ratios differ"))?;
        let identity = rp * rr / (rp + rr - rp * rr);
        ensure((identity - rj).abs() <= 1e-12, || format!("class {k}: J != PR/(P+R-PR)"))?;
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("{pairs} pairs, {c} classes"))
}

fn shape_contracts() -> Outcome {
    let start = Instant::now();
    let model = Model::<f32>::build(ModelConfig::new(Variant::Acanet)).map_err(err)?;
    let x = Tensor::from_fn([1, 3, 480, 480], |[_, c, y, x]| ((c * 7 + y * 3 + x) % 17) as f32 / 8.0 - 1.0);
    let pred = model.forward(&x).map_err(err)?;
    ensure(pred.affordance.shape() == [1, 4, 480, 480], || format!("affordance {:?}", pred.affordance.shape()))?;
    let arm = pred.arm.as_ref().ok_or("no arm mask")?;
    let object = pred.object.as_ref().ok_or("no object mask")?;
    ensure(arm.shape() == [1, 1, 480, 480] && object.shape() == [1, 1, 480, 480], || "mask shapes".into())?;
    let plane = 480 * 480;
    let mut worst: f64 = 0.0;
    for i in 0..plane {
        let s: f64 = (0..4).map(|k| f64::from(pred.affordance.data()[k * plane + i])).sum();
        worst = worst.max((s - 1.0).abs());
    }
    ensure(worst <= 1e-5, || format!("channel sums deviate by {worst:e}"))?;
    let in_unit = |t: &Tensor<f32>| t.data().iter().all(|v| (0.0..=1.0).contains(v));
    ensure(in_unit(arm) && in_unit(object), || "mask values outside [0, 1]".into())?;
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("sum deviation {worst:.1e}, {:.1?}", start.elapsed()))
}

fn parameter_counts() -> Outcome {
    let start = Instant::now();
    let a = Model::<f32>::build(ModelConfig::new(Variant::Acanet)).map_err(err)?.count_parameters();
    let b = Model::<f32>::build(ModelConfig::new(Variant::Rn18uBaseline)).map_err(err)?.count_parameters();
    let near = |n: usize, anchor: f64| ((n as f64 / 1e6) - anchor).abs() <= 0.15 * anchor;
    ensure(near(a, 20.82), || format!("ACANet {a}"))?;
    ensure(near(b, 14.32), || format!("RN18-U {b}"))?;
    ensure(a > b, || "ACANet does not exceed the baseline".into())?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("ACANet {:.2}M, RN18-U {:.2}M", a as f64 / 1e6, b as f64 / 1e6))
}

fn box_centred_at(cx: usize, cy: usize, half: usize) -> BBox {
    BBox::new(cx.saturating_sub(half), cy.saturating_sub(half), cx + half, cy + half).expect("valid box")
}

/// Image whose pixels encode their own coordinates, never black.
fn coordinate_image(w: usize, h: usize) -> RgbImage {
    RgbImage::from_fn(w as u32, h as u32, |x, y| image::Rgb([(x % 250 + 1) as u8, (y % 250 + 1) as u8, 200]))
}

fn check_crop(w: usize, h: usize, bbox: BBox, window: usize, expect: Option<(usize, usize)>) -> Result<CropWindow, String> {
    let plan = plan_crop(w, h, bbox, window).map_err(err)?;
    if let Some((x0, y0)) = expect {
        ensure(
            (plan.x0, plan.y0, plan.width, plan.height, plan.resize_applied) == (x0, y0, window, window, false),
            || format!("window {plan:?}"),
        )?;
    }
    let mut mask = SegmentationMap::filled(w, h, 0);
    for y in bbox.y_min..bbox.y_max {
        for x in bbox.x_min..bbox.x_max {
            mask.set(x, y, if (x + y) % 3 == 0 { 1 } else { 2 });
        }
    }
    mask.set(w - 1, 0, 3);
    let img = coordinate_image(w, h);
    let (ci, cm) = apply_crop(&img, &mask, &plan).map_err(err)?;
    ensure((ci.width() as usize, cm.width()) == (window, window), || "output size".into())?;
    ensure(ci.pixels().all(|p| p.0[2] == 200 && p.0[0] > 0 && p.0[1] > 0), || "padding in output".into())?;
    let src = mask.class_set();
    ensure(cm.class_set().iter().all(|c| src.contains(c)), || "new class ids".into())?;
    if expect.is_some() {
        // Unresized crops copy pixels verbatim.
        for y in 0..window {
            for x in 0..window {
                ensure(cm.get(x, y) == mask.get(plan.x0 + x, plan.y0 + y), || format!("pixel ({x},{y})"))?;
            }
        }
    } else {
        // Nearest-neighbour oracle: each output pixel centre maps into the source window.
        for y in (0..window).step_by(7) {
            for x in (0..window).step_by(7) {
                let sx = plan.x0 + ((x as f64 + 0.5) * plan.width as f64 / window as f64).floor() as usize;
                let sy = plan.y0 + ((y as f64 + 0.5) * plan.height as f64 / window as f64).floor() as usize;
                ensure(cm.get(x, y) == mask.get(sx, sy), || format!("resized pixel ({x},{y})"))?;
            }
        }
    }
    Ok(plan)
}

fn cropping_protocol() -> Outcome {
    let start = Instant::now();
    check_crop(640, 480, box_centred_at(320, 240, 20), 480, Some((80, 0)))?;
    check_crop(640, 480, box_centred_at(10, 10, 5), 480, Some((0, 0)))?;
    let big = BBox::new(20, 20, 620, 620).map_err(err)?;
    let plan = check_crop(640, 640, big, 480, None)?;
    ensure(plan.resize_applied && plan.width >= 600 && plan.height >= 600, || format!("oversized window {plan:?}"))?;
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("windows [80,560)x[0,480), [0,480)x[0,480), {}x{} resized to 480", plan.width, plan.height))
}

fn schedule_semantics() -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig::default();
    let mut s = TrainState::new(&cfg);
    let mut trace = Vec::new();
    for v in [0.7, 0.69, 0.69, 0.69] {
        s = lr_schedule_step(s, Some(v), &cfg);
        trace.push(s.current_lr);
    }
    ensure(trace == [0.001, 0.001, 0.001, 0.0005] && s.lr_drops == 1, || format!("lr trace {trace:?}"))?;
    let mut s = lr_schedule_step(TrainState::new(&cfg), Some(0.5), &cfg);
    for i in 0..10 {
        ensure(!early_stop_check(&s, &cfg), || format!("stopped after {i} flat epochs"))?;
        s = lr_schedule_step(s, Some(0.4), &cfg);
    }
    ensure(early_stop_check(&s, &cfg), || "no stop after 10 flat epochs".into())?;
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok("0.7,0.69,0.69,0.69 -> one halving; stop after 10 flat epochs".into())
}

/// Small network used for the overfit experiment.
fn overfit_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        encoder_width: 16,
        decoder_base_channels: 16,
        fusion_channels: 32,
        ..ModelConfig::miniature(variant, 128)
    }
}

fn end_to_end_overfit() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let manifest = generate_synthetic_fixture(dir.path(), 20, 128, 7).map_err(err)?;
    let cfg = TrainConfig {
        batch_size: 4,
        lr_initial: 0.1,
        max_epochs: 200,
        early_stop_patience: 200,
        target_val_miou: Some(0.9),
        ..TrainConfig::default()
    };
    let mut lines = Vec::new();
    for variant in [Variant::Acanet, Variant::Rn18uBaseline] {
        let t = Instant::now();
        let mut model = Model::<f32>::build(overfit_model(variant)).map_err(err)?;
        let out = train(&mut model, &manifest, &manifest, &cfg, &AugmentationConfig::identity(), None).map_err(err)?;
        let miou = evaluate(&model, &manifest).map_err(err)?.foreground_miou().unwrap_or(0.0);
        let epochs = out.logs.len();
        lines.push(format!("{variant} mIoU {miou:.4} after {epochs} epochs in {:.0?}", t.elapsed()));
        ensure(miou >= 0.9 && epochs <= 200, || lines.join("; "))?;
    }
    within(start.elapsed(), Duration::from_secs(30 * 60))?;
    Ok(lines.join("; "))
}

fn train_log_epoch1(dir: &Path) -> Result<String, String> {
    let log = std::fs::read_to_string(dir.join("train_log.csv")).map_err(err)?;
    let row = log.lines().nth(1).ok_or("empty log")?;
    // Drop the wall-time column.
    let fields: Vec<&str> = row.split(',').collect();
    Ok(fields[..fields.len() - 1].join(","))
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path();
    let data = root.join("data");
    generate_synthetic_fixture(&data, 10, 64, 3).map_err(err)?;
    let config = root.join("run.toml");
    std::fs::write(
        &config,
        "[model]\ninput_size = 64\nencoder_width = 8\ndecoder_base_channels = 8\nfusion_channels = 16\n\
         [train]\nmax_epochs = 3\n",
    )
    .map_err(err)?;
    let mut results = Vec::new();
    for run in ["a", "b"] {
        let out = root.join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_acanet"))
            .arg("train")
            .arg("--config")
            .arg(&config)
            .arg("--train-manifest")
            .arg(data.join("train.toml"))
            .arg("--val-manifest")
            .arg(data.join("val.toml"))
            .args(["--seed", "42", "--output-dir"])
            .arg(&out)
            .output()
            .map_err(err)?;
        ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
        let report = std::fs::read(out.join("report.csv")).map_err(err)?;
        results.push((train_log_epoch1(&out)?, report));
    }
    ensure(results[0].0 == results[1].0, || format!("epoch-1 rows differ: {} vs {}", results[0].0, results[1].0))?;
    ensure(results[0].1 == results[1].1, || "evaluation reports differ".into())?;
    Ok(format!("epoch 1: {}", results[0].0))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("fusion fidelity", fusion_fidelity),
        ("loss oracles", loss_oracles),
        ("gradient check", gradient_correctness),
        ("metric oracle", metric_oracle),
        ("shape and normalization contracts", shape_contracts),
        ("parameter-count anchor", parameter_counts),
        ("cropping protocol", cropping_protocol),
        ("schedule semantics", schedule_semantics),
        ("end-to-end overfit", end_to_end_overfit),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
