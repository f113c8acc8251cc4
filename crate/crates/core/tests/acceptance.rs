//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails. Progress notes go to stderr.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

use cytoparc::arch::{receptive_field, ArchitectureConfig, REFERENCE_PARAMETER_COUNT, REFERENCE_RECEPTIVE_FIELD};
use cytoparc::cortexfield::{
    circle_crossing, correction_angle, dominant_orientation_disc, gradient, rotate_nearest, solve_laplace,
    solve_laplace_subpixel, LaplaceOptions, BG, GM, UP, WM,
};
use cytoparc::dataset::{Dataset, Section, Split};
use cytoparc::metrics::{confusion_matrix, dice, pixel_distance_error, squared_distance_transform, EvalReport};
use cytoparc::net::{check_model_gradients, Model};
use cytoparc::nn::gradcheck::{check_layer, LayerKind};
use cytoparc::pipeline::{
    evaluate, prepare, train, train_gmwm_two_step, GmwmConfig, Orientation, PatchPredictor,
    PreparedSection, Task, TrainConfig,
};
use cytoparc::raster::Raster;
use cytoparc::synthgen::{generate_dataset, generate_followup, DatasetSpec, SynthConfig};
use cytoparc::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn note(msg: &str) {
    eprintln!("  .. {msg}");
}

// ---------------------------------------------------------------------------
// shared benchmark: dataset, prepared sections and trained models

/// Smaller than the desk schedule (192 px, 1500 + 1500) so the ~15 models
/// the suite needs fit a single-core test run.
fn bench_schedule(seed: u64, orientation: Orientation) -> TrainConfig {
    TrainConfig { patch_size: 128, batch_size: 8, iterations: 2000, seed, orientation, ..TrainConfig::default() }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
enum Variant {
    Base,
    Aware,
    Random,
}

struct Bench {
    spec: DatasetSpec,
    ds: Dataset,
    prepared: Vec<PreparedSection>,
    models: BTreeMap<(Variant, u64, Option<usize>), Model>,
}

impl Bench {
    fn new() -> Self {
        let spec = DatasetSpec { sections: 24, styles: 4, seed: 1, synth: SynthConfig::benchmark() };
        let ds = generate_dataset(&spec).expect("benchmark dataset");
        let prepared = ds.sections.iter().map(|s| prepare(s, Task::Areas, true, true).expect("prepare")).collect();
        Bench { spec, ds, prepared, models: BTreeMap::new() }
    }

    fn indices(&self, split: Split, style: Option<usize>, exclude: Option<usize>) -> Vec<usize> {
        (0..self.ds.sections.len())
            .filter(|&i| self.ds.splits[i] == split)
            .filter(|&i| style.is_none_or(|s| self.ds.sections[i].meta.style_index == s))
            .filter(|&i| exclude != Some(self.ds.sections[i].meta.style_index))
            .collect()
    }

    /// Model of the given variant, trained on the train split (minus one
    /// held-out style when given); cached.
    fn model(&mut self, v: Variant, seed: u64, held_out: Option<usize>) -> &Model {
        let key = (v, seed, held_out);
        if !self.models.contains_key(&key) {
            let classes = self.ds.classes();
            let arch = match v {
                Variant::Aware => ArchitectureConfig::desk_atlas_aware(classes, self.ds.area_names.len()),
                _ => ArchitectureConfig::desk_base(classes),
            };
            let mut m = Model::new(&arch, 1000 + seed).expect("model");
            let orientation = if v == Variant::Random { Orientation::Random } else { Orientation::Corrected };
            let train_set = self.subset(&self.indices(Split::Train, None, held_out));
            let t = Instant::now();
            let log = train(&mut m, &train_set, &bench_schedule(seed, orientation)).expect("training");
            let (first, last) = log.head_tail_means(100);
            note(&format!(
                "trained {v:?} seed {seed} held-out {held_out:?}: loss {first:.3} -> {last:.3} in {:.0}s",
                t.elapsed().as_secs_f64()
            ));
            self.models.insert(key, m);
        }
        &self.models[&key]
    }

    fn evaluate(&mut self, v: Variant, seed: u64, held_out: Option<usize>, on: &[usize]) -> EvalReport {
        self.evaluate_on(v, seed, held_out, &self.subset(on))
    }

    fn evaluate_on(&mut self, v: Variant, seed: u64, held_out: Option<usize>, sections: &[PreparedSection]) -> EvalReport {
        let names = self.ds.class_names();
        self.model(v, seed, held_out);
        let model = &self.models[&(v, seed, held_out)];
        let orientation = if v == Variant::Random { Orientation::None } else { Orientation::Corrected };
        evaluate_with(model, sections, orientation, &names)
    }

    fn subset(&self, idx: &[usize]) -> Vec<PreparedSection> {
        idx.iter().map(|&i| self.prepared[i].clone()).collect()
    }
}

fn evaluate_with(model: &Model, sections: &[PreparedSection], o: Orientation, names: &[String]) -> EvalReport {
    evaluate(&PatchPredictor::new(model, 128, o), sections, names).expect("evaluation").report
}

// ---------------------------------------------------------------------------

fn c1_gradients() -> Outcome {
    let t = Instant::now();
    let layers = [
        (LayerKind::Conv { k: 3, stride: 1, pad: 1 }, 1e-6),
        (LayerKind::Conv { k: 3, stride: 2, pad: 1 }, 1e-6),
        (LayerKind::Conv { k: 5, stride: 2, pad: 2 }, 1e-6),
        (LayerKind::Conv { k: 1, stride: 1, pad: 0 }, 1e-6),
        (LayerKind::Upsample2, 1e-6),
        (LayerKind::Concat, 1e-6),
        (LayerKind::BatchNormEval, 1e-6),
        (LayerKind::BatchNormTrain, 1e-3),
        (LayerKind::MaxPool2, 1e-3),
        (LayerKind::Relu, 1e-3),
    ];
    let mut worst_linear = 0.0f64;
    let mut worst_layer = 0.0f64;
    let mut pass = true;
    for (kind, tol) in layers {
        for seed in 0..20 {
            let r = check_layer(kind, seed, 40).expect("layer check");
            pass &= r.passes(tol);
            if tol == 1e-6 {
                worst_linear = worst_linear.max(r.max_rel_error);
            } else {
                worst_layer = worst_layer.max(r.max_rel_error);
            }
        }
    }
    let mut worst_net = 0.0f64;
    for seed in 0..20 {
        let r = check_model_gradients(&ArchitectureConfig::desk_base(7), seed, 128, 40).expect("net check");
        pass &= r.passes(1e-2);
        worst_net = worst_net.max(r.max_rel_error);
    }
    let secs = t.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    outcome(
        pass,
        format!(
            "max rel err linear {worst_linear:.1e} (<1e-6), layers {worst_layer:.1e} (<1e-3), desk net {worst_net:.1e} (<1e-2); 20 seeds; {secs:.0}s (<120s)"
        ),
    )
}

fn c2_architecture() -> Outcome {
    let cfg = ArchitectureConfig::canonical_base(16);
    let (rf, stride) = receptive_field(&cfg).expect("rf");
    let model = Model::new(&cfg, 0).expect("canonical model");
    let names: Vec<String> = (0..16).map(|i| format!("c{i}")).collect();
    let m = model.manifest(&names, 0, serde_json::Value::Null).expect("manifest");
    let aware = ArchitectureConfig::canonical_atlas_aware(16, 13);
    let (rf_a, stride_a) = receptive_field(&aware).expect("rf");
    let pass = stride == 8
        && rf == 1169
        && (1000..=2000).contains(&rf)
        && stride_a == 8
        && rf_a == rf
        && m.receptive_field == rf
        && m.reference_receptive_field == 1481
        && m.reference_parameter_count == 1_479_728
        && REFERENCE_RECEPTIVE_FIELD == 1481
        && REFERENCE_PARAMETER_COUNT == 1_479_728;
    outcome(
        pass,
        format!(
            "stride {stride}, rf {rf} (atlas-aware {rf_a}), params {} | reference rf {} params {}",
            m.parameter_count, m.reference_receptive_field, m.reference_parameter_count
        ),
    )
}

fn c3_laplace() -> Outcome {
    let t = Instant::now();
    let (r_in, r_out, size) = (10.0, 30.0, 71usize);
    let c = (size as f64 - 1.0) / 2.0;
    let mask = Raster::from_fn(size, size, |y, x| {
        let r = (y as f64 - c).hypot(x as f64 - c);
        if r < r_in {
            WM
        } else if r > r_out {
            BG
        } else {
            GM
        }
    });
    let cross = |p, q: (usize, usize)| {
        let r = if mask.get(q.0, q.1) == WM { r_in } else { r_out };
        circle_crossing((c, c), r, p, q).unwrap_or(0.5)
    };
    let opts = LaplaceOptions { tol: 1e-6, ..LaplaceOptions::default() };
    let f = solve_laplace_subpixel(&mask, &opts, cross).expect("annulus solve");
    let (mut max_err, mut lo, mut hi) = (0.0f64, f64::MAX, f64::MIN);
    for y in 0..size {
        for x in 0..size {
            let v = f.values.get(y, x);
            if v.is_finite() {
                let r = (y as f64 - c).hypot(x as f64 - c);
                max_err = max_err.max((v - (r / r_out).ln() / (r_in / r_out).ln()).abs());
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let principle = lo >= -1e-9 && hi <= 1.0 + 1e-9;
    outcome(
        max_err < 1e-2 && principle && secs < 30.0,
        format!("max abs error {max_err:.2e} (<1e-2), range [{lo:.3e}, {hi:.6}] within [0,1]±1e-9, {} iterations, {secs:.1}s", f.iterations),
    )
}

fn brute_sq_edt(mask: &Raster<bool>) -> Raster<f64> {
    let (h, w) = mask.dims();
    let pts: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| mask.get(y, x)).collect();
    Raster::from_fn(h, w, |y, x| {
        pts.iter()
            .map(|&(py, px)| (py as f64 - y as f64).powi(2) + (px as f64 - x as f64).powi(2))
            .fold(f64::MAX, f64::min)
    })
}

fn c4_metrics() -> Outcome {
    let mut rng = Rng::new(2024);
    let mut edt_ok = 0;
    for k in 0..50 {
        let density = [0.01, 0.05, 0.2, 0.5][k % 4];
        let mut mask = Raster::from_fn(48, 48, |_, _| rng.bernoulli(density));
        if !mask.data().iter().any(|&b| b) {
            mask.set(24, 24, true);
        }
        edt_ok += usize::from(squared_distance_transform(&mask).expect("edt") == brute_sq_edt(&mask));
    }
    // left half class 0, right half class 1
    let gt = Raster::from_fn(4, 4, |_, x| u8::from(x >= 2));
    let mut one = gt.clone();
    one.set(0, 1, 1);
    let mut two = gt.clone();
    two.set(0, 0, 1);
    let e1 = pixel_distance_error(&one, &gt, None).expect("eps");
    let e2 = pixel_distance_error(&two, &gt, None).expect("eps");
    let cm = confusion_matrix(&[0, 1, 1, 1], &[0, 0, 1, 1], None, 2).expect("cm");
    let (_, mean) = dice(&cm);
    // 11/15 has no exact binary form; allow the rounding of the two-term mean
    let pass = edt_ok == 50 && e1.1 == 6.25 && e2.1 == 12.5 && (mean - 11.0 / 15.0).abs() <= 4.0 * f64::EPSILON;
    outcome(pass, format!("EDT exact on {edt_ok}/50 masks; eps hand cases {} / {} (6.25 / 12.5); Dice {mean} (11/15)", e1.1, e2.1))
}

fn c5_gmwm(bench: &Bench) -> Outcome {
    let t = Instant::now();
    let step = TrainConfig { orientation: Orientation::None, iterations: 1500, ..TrainConfig::desk() };
    let cfg = GmwmConfig { step1: step.clone(), step2: step, background_weight: 0.5, subset: 20 };
    let train_secs: Vec<&Section> = bench.ds.split(Split::Train);
    let out = train_gmwm_two_step(&train_secs, &cfg, 11).expect("two-step training");
    let test: Vec<PreparedSection> =
        bench.ds.split(Split::Test).iter().map(|s| prepare(s, Task::Tissue, false, false).expect("prepare")).collect();
    let names: Vec<String> = ["gm", "wm", "bg"].map(String::from).to_vec();
    let e = evaluate(&PatchPredictor::new(&out.tissue, 192, Orientation::None), &test, &names).expect("eval");
    let d = |k: u8| e.report.per_class_dice[k as usize].unwrap_or(0.0);
    let secs = t.elapsed().as_secs_f64();
    let pass = d(BG) >= 0.90 && d(GM) >= 0.80 && d(WM) >= 0.80 && secs < 1800.0 && out.tissue.classes() == 3;
    outcome(
        pass,
        format!(
            "held-out Dice bg {:.3} (>=0.90), gm {:.3} (>=0.80), wm {:.3} (>=0.80); 2x1500 iterations at 192 px; {secs:.0}s",
            d(BG),
            d(GM),
            d(WM)
        ),
    )
}

fn twin_classes(ds: &Dataset) -> Vec<usize> {
    ds.area_names.iter().enumerate().filter(|(_, n)| n.starts_with('T')).map(|(i, _)| i).collect()
}

fn c6_ablation(bench: &mut Bench) -> Outcome {
    let t = Instant::now();
    let test = bench.indices(Split::Test, None, None);
    let twins = twin_classes(&bench.ds);
    let (mut d_all, mut d_twin, mut eps_b, mut eps_a) = (vec![], vec![], vec![], vec![]);
    for seed in SEEDS {
        let b = bench.evaluate(Variant::Base, seed, None, &test);
        let a = bench.evaluate(Variant::Aware, seed, None, &test);
        note(&format!(
            "seed {seed}: base Dice {:.3} twins {:.3} eps {:.2} | aware Dice {:.3} twins {:.3} eps {:.2}",
            b.mean_dice,
            b.mean_dice_of(&twins),
            b.eps,
            a.mean_dice,
            a.mean_dice_of(&twins),
            a.eps
        ));
        d_all.push(a.mean_dice - b.mean_dice);
        d_twin.push(a.mean_dice_of(&twins) - b.mean_dice_of(&twins));
        eps_b.push(b.eps);
        eps_a.push(a.eps);
    }
    let (da, dt, eb, ea) = (median(d_all), median(d_twin), median(eps_b), median(eps_a));
    let secs = t.elapsed().as_secs_f64();
    outcome(
        da >= 0.05 && dt >= 0.10 && ea < eb && secs < 7200.0,
        format!("median Dice gain {da:.3} (>=0.05), twin-pair gain {dt:.3} (>=0.10), eps aware {ea:.2} < base {eb:.2}; {secs:.0}s"),
    )
}

fn c7_transfer(bench: &mut Bench) -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for v in [Variant::Aware, Variant::Base] {
        let (mut ratios, mut dices) = (vec![], vec![]);
        for seed in SEEDS {
            let style = seed as usize % bench.spec.styles;
            // the style's 2 test sections alone make ε too noisy; add fresh
            // sections of the same style that no model has seen
            let mut on = bench.subset(&bench.indices(Split::Test, Some(style), None));
            for s in generate_followup(&bench.spec, style, 6).expect("follow-up sections") {
                on.push(prepare(&s, Task::Areas, true, true).expect("prepare"));
            }
            let all = bench.evaluate_on(v, seed, None, &on);
            let held = bench.evaluate_on(v, seed, Some(style), &on);
            // the two most frequent areas in this ground truth
            let mut freq: Vec<(u64, usize)> =
                (0..bench.ds.area_names.len()).map(|k| (held.confusion.counts[k].iter().sum::<u64>(), k)).collect();
            freq.sort_by(|a, b| b.cmp(a));
            let top = [freq[0].1, freq[1].1];
            note(&format!(
                "{v:?} seed {seed} style {style}: eps all-styles {:.2} held-out {:.2}; Dice top-2 held-out {:.3}",
                all.eps,
                held.eps,
                held.mean_dice_of(&top)
            ));
            ratios.push(held.eps / all.eps.max(1e-12));
            dices.push(held.mean_dice_of(&top));
        }
        let (r, d) = (median(ratios), median(dices));
        // the transfer claim is about the atlas-aware model; the texture-only
        // base model is reported for comparison
        if v == Variant::Aware {
            pass &= r <= 2.0 && d >= 0.6;
            parts.push(format!("atlas-aware: eps ratio {r:.2} (<=2.0), top-2 Dice {d:.3} (>=0.6)"));
        } else {
            parts.push(format!("base, not gated: eps ratio {r:.2}, top-2 Dice {d:.3}"));
        }
    }
    outcome(pass, format!("{} (median of 3 seeds)", parts.join("; ")))
}

/// Fraction of commonly-cortical cells with equal labels, after the integer
/// shift (±2 cells) that best overlaps the two cortex masks.
fn aligned_agreement(pa: &Raster<u8>, ga: &Raster<u8>, pb: &Raster<u8>, gb: &Raster<u8>, cortex: impl Fn(u8) -> bool) -> f64 {
    let (h, w) = pa.dims();
    let mut best = (0usize, 0isize, 0isize);
    for dy in -2isize..=2 {
        for dx in -2isize..=2 {
            let mut overlap = 0;
            for y in 0..h {
                for x in 0..w {
                    if let Some(g) = gb.at(y as isize + dy, x as isize + dx) {
                        overlap += usize::from(cortex(ga.get(y, x)) && cortex(g));
                    }
                }
            }
            if overlap > best.0 {
                best = (overlap, dy, dx);
            }
        }
    }
    let (_, dy, dx) = best;
    let (mut same, mut total) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if let (Some(g), Some(p)) = (gb.at(y as isize + dy, x as isize + dx), pb.at(y as isize + dy, x as isize + dx)) {
                if cortex(ga.get(y, x)) && cortex(g) {
                    total += 1;
                    same += usize::from(pa.get(y, x) == p);
                }
            }
        }
    }
    same as f64 / total.max(1) as f64
}

fn c8_z_consistency(bench: &mut Bench) -> Outcome {
    let fresh = generate_followup(&bench.spec, 0, 3).expect("follow-up sections");
    let prepared: Vec<PreparedSection> = fresh.iter().map(|s| prepare(s, Task::Areas, true, true).expect("prepare")).collect();
    let gm = bench.ds.area_names.len() as u8;
    let names = bench.ds.class_names();
    let model = bench.model(Variant::Aware, 0, None);
    let e = evaluate(&PatchPredictor::new(model, 128, Orientation::Corrected), &prepared, &names).expect("eval");
    let mut agreements = Vec::new();
    for (i, j) in [(0, 1), (1, 2), (0, 2)] {
        agreements.push(aligned_agreement(&e.predictions[i], &e.truths[i], &e.predictions[j], &e.truths[j], |l| l <= gm));
    }
    let min = agreements.iter().copied().fold(1.0, f64::min);
    outcome(
        min >= 0.8,
        format!(
            "pairwise agreement on cortex {} (min {min:.3} >= 0.8) over z {:?}",
            agreements.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join("/"),
            fresh.iter().map(|s| s.meta.z).collect::<Vec<_>>()
        ),
    )
}

fn angle_diff(a: f64, b: f64) -> f64 {
    ((a - b + PI).rem_euclid(2.0 * PI) - PI).abs()
}

fn c9_orientation(bench: &mut Bench) -> Outcome {
    // self-consistency: rotate the whole tissue mask about a gray-matter
    // point, re-solve, and compare the orientation of the patch-sized disc
    // there with the original one turned by the same angle
    let tissue = bench.ds.sections[0].segmask.clone().expect("tissue");
    let field = gradient(&solve_laplace(&tissue, &LaplaceOptions::default()).expect("field"));
    let radius = 64.0;
    let (h, w) = tissue.dims();
    let out = ((h * h + w * w) as f64).sqrt().ceil() as usize | 1;
    let mid = ((out - 1) / 2) as f64;
    let mut worst = 0.0f64;
    let mut rng = Rng::new(5);
    let mut checked = 0;
    while checked < 6 {
        let (cy, cx) = (rng.below(h), rng.below(w));
        if tissue.get(cy, cx) != GM {
            continue;
        }
        let c = (cy as f64, cx as f64);
        let Ok(theta) = dominant_orientation_disc(&field, c, radius) else { continue };
        for alpha in [correction_angle(theta), 0.7, -2.1] {
            let rotated = rotate_nearest(&tissue, c, alpha, (out, out), BG);
            let rf = gradient(&solve_laplace(&rotated, &LaplaceOptions::default()).expect("rotated field"));
            let theta_r = dominant_orientation_disc(&rf, (mid, mid), radius).expect("orientation");
            // rotating the content by `alpha` moves direction θ to θ − alpha
            worst = worst.max(angle_diff(theta_r, theta - alpha).to_degrees());
            if alpha == correction_angle(theta) {
                worst = worst.max(angle_diff(theta_r, UP).to_degrees());
            }
        }
        checked += 1;
    }
    let test = bench.indices(Split::Test, None, None);
    let (mut corrected, mut random) = (vec![], vec![]);
    for seed in SEEDS {
        let c = bench.evaluate(Variant::Base, seed, None, &test).mean_dice;
        let r = bench.evaluate(Variant::Random, seed, None, &test).mean_dice;
        note(&format!("seed {seed}: mean Dice corrected {c:.3}, random rotation {r:.3}"));
        corrected.push(c);
        random.push(r);
    }
    let (mc, mr) = (median(corrected), median(random));
    outcome(
        worst <= 2.0 && mc >= mr,
        format!("orientation after rotation within {worst:.2} deg (<=2); median mean Dice corrected {mc:.3} >= random {mr:.3}"),
    )
}

fn same_files(a: &std::path::Path, b: &std::path::Path) -> (usize, bool) {
    let mut files = 0;
    let mut same = true;
    for entry in walk(a) {
        let rel = entry.strip_prefix(a).expect("prefix");
        same &= std::fs::read(&entry).ok() == std::fs::read(b.join(rel)).ok();
        files += 1;
    }
    (files, same && walk(b).len() == files)
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).expect("dir") {
        let p = e.expect("entry").path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn c10_determinism(bench: &Bench) -> Outcome {
    let dirs = [tempfile::tempdir().expect("tmp"), tempfile::tempdir().expect("tmp")];
    let names = bench.ds.class_names();
    let train_set = bench.subset(&bench.indices(Split::Train, None, None)[..4]);
    let test_set = bench.subset(&bench.indices(Split::Test, None, None)[..2]);
    let mut reports_equal = true;
    for aware in [false, true] {
        let mut reports = Vec::new();
        for dir in &dirs {
            let arch = if aware {
                ArchitectureConfig::desk_atlas_aware(bench.ds.classes(), bench.ds.area_names.len())
            } else {
                ArchitectureConfig::desk_base(bench.ds.classes())
            };
            let mut m = Model::new(&arch, 77).expect("model");
            let cfg = TrainConfig { patch_size: 128, batch_size: 4, iterations: 20, seed: 78, ..TrainConfig::default() };
            train(&mut m, &train_set, &cfg).expect("training");
            let manifest = m.manifest(&names, 77, serde_json::to_value(&cfg).expect("json")).expect("manifest");
            m.save(dir.path().join(if aware { "aware" } else { "base" }), &manifest).expect("save");
            let report = evaluate_with(&m, &test_set, Orientation::Corrected, &names);
            reports.push(serde_json::to_vec(&report).expect("json"));
        }
        reports_equal &= reports[0] == reports[1];
    }
    let again = generate_dataset(&bench.spec).expect("dataset");
    let regenerated = again == bench.ds;
    bench.ds.save(dirs[0].path().join("data")).expect("save dataset");
    again.save(dirs[1].path().join("data")).expect("save dataset");
    let (files, same) = same_files(dirs[0].path(), dirs[1].path());
    outcome(
        reports_equal && regenerated && same && files > 0,
        format!("{files} checkpoint and dataset files byte-identical: {same}; evaluation reports identical: {reports_equal}; dataset regenerated identically: {regenerated}"),
    )
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome, Duration)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        eprintln!("criterion {n}: {name}");
        let t = Instant::now();
        let o = f();
        let d = t.elapsed();
        println!("[{}] C{n} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o, d));
    };
    run(1, "gradient correctness", &mut c1_gradients);
    run(2, "architecture manifest", &mut c2_architecture);
    run(3, "laplace solver", &mut c3_laplace);
    run(4, "metric oracles", &mut c4_metrics);
    eprintln!("generating benchmark dataset");
    let mut bench = Bench::new();
    run(5, "two-step gm/wm bootstrap", &mut || c5_gmwm(&bench));
    run(6, "atlas ablation", &mut || c6_ablation(&mut bench));
    run(7, "held-out style transfer", &mut || c7_transfer(&mut bench));
    run(8, "z-consistency", &mut || c8_z_consistency(&mut bench));
    run(9, "orientation correction", &mut || c9_orientation(&mut bench));
    run(10, "determinism", &mut || c10_determinism(&bench));
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    eprintln!("acceptance finished in {:.0}s", start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
