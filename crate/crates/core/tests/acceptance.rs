//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use conceptshield::baseline::{build_mask_set, double_masked_predict, double_masking_rule, masked_pixels, MaskCount};
use conceptshield::concepts::nmf::frobenius_error;
use conceptshield::concepts::{nmf, NmfConfig};
use conceptshield::data::synth::write_corpus;
use conceptshield::data::Split;
use conceptshield::defense::{top_n_mask, DefenseConfig, DefensePlan, Selection};
use conceptshield::eval::config::Config;
use conceptshield::eval::{Mode, Pipeline, SweepAxis, OURS, PATCHCLEANSER, UNDEFENDED};
use conceptshield::importance::sobol_total_indices;
use conceptshield::model::resnet::resnet;
use conceptshield::model::{train, ResnetConfig, TrainConfig};
use ndarray::Array2;
use rand::Rng;

use common::{random_image, random_library, rng, tiny_adapter, workspace_root};

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn nmf_monotone() -> Outcome {
    let start = Instant::now();
    let mut worst_rise = 0.0f64;
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let a = Array2::from_shape_fn((50, 20), |_| r.gen::<f64>());
        let cfg = NmfConfig {
            max_iters: 200,
            tol: 0.0,
            ..NmfConfig::new(5, seed)
        };
        let res = nmf(&a, &cfg).map_err(|e| e.to_string())?;
        check(res.history.len() >= 200, format!("seed {seed}: only {} steps", res.history.len()))?;
        for pair in res.history.windows(2) {
            worst_rise = worst_rise.max(pair[1] - pair[0]);
        }
    }
    check(worst_rise <= 1e-9, format!("error rose by {worst_rise:e}"))?;
    let mut worst_planted = 0.0f64;
    for seed in 0..5 {
        let mut r = rng(200 + seed);
        let u = Array2::from_shape_fn((50, 5), |_| r.gen::<f64>());
        let w = Array2::from_shape_fn((5, 20), |_| r.gen::<f64>());
        let a = u.dot(&w);
        let cfg = NmfConfig {
            max_iters: 100_000,
            tol: 0.0,
            ..NmfConfig::new(5, seed)
        };
        let res = nmf(&a, &cfg).map_err(|e| e.to_string())?;
        let rel = frobenius_error(&a, &res.u, &res.w) / a.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst_planted = worst_planted.max(rel);
    }
    check(worst_planted <= 1e-3, format!("planted relative error {worst_planted:.2e}"))?;
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(30), format!("took {elapsed:?}"))?;
    Ok(format!(
        "max step rise {worst_rise:.1e}, planted rel error {worst_planted:.1e}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn sobol_oracle() -> Outcome {
    let start = Instant::now();
    let coef = [1.0, 2.0, 3.0, 0.5, 0.0];
    let total: f64 = coef.iter().map(|c| c * c).sum();
    let truth: Vec<f64> = coef.iter().map(|c| c * c / total).collect();
    let additive = |x: &[f64]| x.iter().zip(&coef).map(|(a, c)| a * c).sum::<f64>();
    let mut detail = Vec::new();
    for (n, tol) in [(8192, 0.02), (2048, 0.05)] {
        let est = sobol_total_indices(additive, n, coef.len(), 3).map_err(|e| e.to_string())?;
        let err = est.totals.iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        check(err <= tol, format!("N={n}: max error {err:.4} > {tol}"))?;
        detail.push(format!("N={n} err {err:.4}"));
    }
    let single = sobol_total_indices(|x: &[f64]| (3.0 * x[2]).sin(), 2048, 6, 9).map_err(|e| e.to_string())?;
    check(single.totals[2] >= 0.95, format!("single factor S_T {:.4}", single.totals[2]))?;
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("{}, single-factor S_T {:.4}", detail.join(", "), single.totals[2]))
}

fn top_n_oracle() -> Outcome {
    let mut r = rng(3);
    let mut ties = 0usize;
    for case in 0..100 {
        let (h, w) = (r.gen_range(1..40), r.gen_range(1..40));
        let levels = if case % 2 == 0 { 4 } else { 1000 };
        let values = Array2::from_shape_fn((h, w), |_| r.gen_range(0..levels) as f64 / levels as f64);
        let half_percent: usize = r.gen_range(0..=200);
        let n = half_percent as f64 / 2.0;
        let count = (half_percent * h * w).div_ceil(200);
        let flat: Vec<f64> = values.iter().copied().collect();
        let mut order: Vec<usize> = (0..flat.len()).collect();
        order.sort_by(|&a, &b| flat[b].partial_cmp(&flat[a]).unwrap().then(a.cmp(&b)));
        let mut expected = Array2::from_elem((h, w), false);
        for &i in &order[..count] {
            expected[[i / w, i % w]] = true;
        }
        if count > 0 && count < flat.len() && flat[order[count - 1]] == flat[order[count]] {
            ties += 1;
        }
        let got = top_n_mask(&values, n);
        check(got.mask == expected, format!("case {case}: {h}x{w}, n={n}"))?;
    }
    check(ties > 0, "no tie cases were generated")?;
    for n in [1.0, 5.0, 37.5] {
        let got = top_n_mask(&Array2::from_elem((16, 16), 0.3), n);
        let count = got.selected();
        let expected: Vec<bool> = (0..256).map(|i| i < count).collect();
        check(got.mask.iter().copied().eq(expected), format!("constant map n={n} not row-major"))?;
    }
    Ok(format!("100 maps ({ties} with ties at the cut), constant maps row-major"))
}

fn identity_defenses() -> Outcome {
    let adapter = tiny_adapter(2, 5);
    let library = random_library(&adapter, 4, 6);
    let mut r = rng(7);
    let mut masked_total = 0usize;
    for i in 0..100 {
        let img = random_image(&format!("fuzz{i}"), i % 2, 1000 + i as u64);
        let base = DefenseConfig::new(2, 5.0, 64);
        let plan = DefensePlan::new(&adapter, &img, &library, base.blur).map_err(|e| e.to_string())?;
        for empty in [DefenseConfig { m: 0, ..base }, DefenseConfig { n_percent: 0.0, ..base }] {
            let out = plan.apply(&adapter, &empty).map_err(|e| e.to_string())?;
            check(out.mask.selected() == 0, format!("image {i}: empty config masked pixels"))?;
            check(out.defended.pixels() == img.pixels(), format!("image {i}: identity changed pixels"))?;
            check(out.label == plan.predicted, format!("image {i}: identity changed label"))?;
        }
        let cfg = DefenseConfig {
            m: r.gen_range(1..=4),
            n_percent: r.gen_range(0.5..40.0),
            selection: if i % 3 == 0 { Selection::Fused } else { Selection::PerConcept },
            ..base
        };
        let out = plan.apply(&adapter, &cfg).map_err(|e| e.to_string())?;
        masked_total += out.mask.selected();
        for ((idx, &a), &b) in img.pixels().indexed_iter().zip(out.defended.pixels().iter()) {
            let inside = out.mask.mask[[idx.1, idx.2]];
            if !inside {
                check(a.to_bits() == b.to_bits(), format!("image {i}: pixel {idx:?} outside the mask changed"))?;
            }
        }
    }
    Ok(format!("200 empty configs identical, 100 fuzzed images ({masked_total} masked pixels)"))
}

/// Reference rule written directly from the two-round definition, over a full table.
fn enumeration_oracle(first: &[usize], second: &[Vec<usize>]) -> usize {
    let mut counts = std::collections::BTreeMap::new();
    for &l in first {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let best = counts.values().copied().max().unwrap();
    let majority = *counts.iter().find(|(_, &c)| c == best).unwrap().0;
    if counts.len() == 1 {
        return majority;
    }
    for (i, &label) in first.iter().enumerate() {
        if label != majority && second[i].iter().all(|&l| l == label) {
            return label;
        }
    }
    majority
}

fn double_masking() -> Outcome {
    let mut r = rng(11);
    for t in 0..200 {
        let masks = r.gen_range(1..=16);
        let classes = r.gen_range(1..=4);
        let bias = r.gen_range(0.0..1.0);
        let draw = |r: &mut rand_chacha::ChaCha8Rng| if r.gen_bool(bias) { 0 } else { r.gen_range(0..classes) };
        let first: Vec<usize> = (0..masks).map(|_| draw(&mut r)).collect();
        let mut second = vec![vec![0; masks]; masks];
        #[allow(clippy::needless_range_loop)]
        for i in 0..masks {
            // Masking the same region twice is the single-mask prediction.
            second[i][i] = first[i];
            for j in i + 1..masks {
                let l = if r.gen_bool(0.5) { first[i] } else { draw(&mut r) };
                second[i][j] = l;
                second[j][i] = l;
            }
        }
        let got = double_masking_rule(&first, |i, j| Ok(second[i][j])).map_err(|e| e.to_string())?;
        let want = enumeration_oracle(&first, &second);
        check(got == want, format!("table {t}: rule {got}, oracle {want}"))?;
    }
    let mut checked = 0usize;
    for r_masks in 1..=6 {
        for count in [MaskCount::PerAxis, MaskCount::Total] {
            for est in 1..32 {
                let set = build_mask_set(64, 64, r_masks, count, est, [0.5; 3]).map_err(|e| e.to_string())?;
                for top in 0..=64 - est {
                    for left in 0..=64 - est {
                        check(
                            set.masks.iter().any(|m| m.contains(top, left, est)),
                            format!("R={r_masks} est={est}: patch at ({top},{left}) uncovered"),
                        )?;
                        checked += 1;
                    }
                }
            }
        }
    }
    let adapter = tiny_adapter(3, 12);
    let set = build_mask_set(64, 64, 3, MaskCount::PerAxis, 9, adapter.neutral_fill()).map_err(|e| e.to_string())?;
    for i in 0..5 {
        let img = random_image(&format!("dm{i}"), 0, 50 + i);
        let label_of = |rects: &[_]| adapter.label_of(masked_pixels(&img, rects, set.fill).view()).unwrap();
        let first: Vec<usize> = set.masks.iter().map(|m| label_of(&[*m])).collect();
        let second: Vec<Vec<usize>> = set
            .masks
            .iter()
            .map(|a| set.masks.iter().map(|b| label_of(&[*a, *b])).collect())
            .collect();
        let got = double_masked_predict(&adapter, &img, &set).map_err(|e| e.to_string())?;
        check(got == enumeration_oracle(&first, &second), format!("classifier image {i} disagrees"))?;
    }
    Ok(format!("200 tables match the oracle, {checked} patch placements covered at 64px"))
}

fn desk_config() -> Config {
    Config::load(&workspace_root().join("configs/desk.toml")).expect("desk config parses")
}

struct DeskRun {
    comparison: Outcome,
    sweeps: Outcome,
}

fn desk_end_to_end(out: &Path) -> DeskRun {
    let start = Instant::now();
    let run = || -> Result<(conceptshield::eval::EvaluationReport, Pipeline), String> {
        let mut p = Pipeline::new(desk_config(), out, false).map_err(|e| e.to_string())?;
        let report = p.run_comparison().map_err(|e| e.to_string())?;
        Ok((report, p))
    };
    let (report, mut pipeline) = match run() {
        Ok(v) => v,
        Err(e) => {
            return DeskRun {
                comparison: Err(e.clone()),
                sweeps: Err(format!("no desk run: {e}")),
            }
        }
    };
    let elapsed = start.elapsed();
    let comparison = (|| {
        let und = report.row(UNDEFENDED).ok_or("missing undefended row")?;
        let ours = report.row(OURS).ok_or("missing defense row")?;
        let pc = report.row(PATCHCLEANSER).ok_or("missing baseline row")?;
        for (cell, area) in und.robust.iter().zip(&report.areas) {
            check(cell.correct == 0, format!("undefended robust {:.3} at {area}", cell.accuracy))?;
        }
        for (cell, area) in ours.robust.iter().zip(&report.areas) {
            check(cell.accuracy >= 0.70, format!("robust {:.3} < 0.70 at area {area}", cell.accuracy))?;
        }
        check(ours.clean.accuracy >= 0.95, format!("clean recovery {:.3} < 0.95", ours.clean.accuracy))?;
        let mean = |row: &conceptshield::eval::report::ReportRow| {
            row.robust.iter().map(|c| c.accuracy).sum::<f64>() / row.robust.len() as f64
        };
        check(
            mean(ours) >= mean(pc),
            format!("mean robust {:.3} below baseline {:.3}", mean(ours), mean(pc)),
        )?;
        check(elapsed < Duration::from_secs(30 * 60), format!("took {elapsed:?}"))?;
        let robust: Vec<String> = ours.robust.iter().map(|c| format!("{:.3}", c.accuracy)).collect();
        Ok(format!(
            "clean {:.3}, robust [{}], baseline mean {:.3}, {:.0}s",
            ours.clean.accuracy,
            robust.join(", "),
            mean(pc),
            elapsed.as_secs_f64()
        ))
    })();
    let sweeps = (|| {
        let n = pipeline.run_sweep(SweepAxis::NPercent).map_err(|e| e.to_string())?;
        let m = pipeline.run_sweep(SweepAxis::M).map_err(|e| e.to_string())?;
        let col = n.areas.iter().position(|&a| (a - 0.02).abs() < 1e-12).ok_or("no 2% column")?;
        let at = |s: f64| n.row(s).map(|r| r.robust[col].accuracy).ok_or(format!("no n={s} row"));
        let (lo, hi) = (at(2.0)?, at(10.0)?);
        check(hi - lo >= 0.10, format!("robust@2%: n=10 {hi:.3} vs n=2 {lo:.3}"))?;
        let clean: Vec<f64> = m.rows.iter().map(|r| r.clean.accuracy).collect();
        for (i, pair) in clean.windows(2).enumerate() {
            check(
                pair[1] <= pair[0] + 0.02,
                format!("clean rises from m={} to m={}: {clean:?}", m.rows[i].setting, m.rows[i + 1].setting),
            )?;
        }
        let clean: Vec<String> = clean.iter().map(|c| format!("{c:.3}")).collect();
        Ok(format!("robust@2% n=2 {lo:.3} -> n=10 {hi:.3}; clean over m [{}]", clean.join(", ")))
    })();
    DeskRun { comparison, sweeps }
}

fn reduced_config() -> Config {
    let mut cfg = desk_config();
    cfg.data.synth.classes = 2;
    cfg.data.synth.images_per_class = 80;
    cfg.model.train.epochs = 6;
    cfg.importance.designs = 256;
    cfg.importance.images = 2;
    cfg.concepts.k = 6;
    cfg.attack.max_images = Some(16);
    cfg.attack.steps = 100;
    cfg
}

fn determinism(scratch: &Path) -> Outcome {
    let mut texts = Vec::new();
    for run in ["a", "b"] {
        let out = scratch.join(run);
        let mut p = Pipeline::new(reduced_config(), &out, false).map_err(|e| e.to_string())?;
        p.run_comparison().map_err(|e| e.to_string())?;
        let json = std::fs::read(out.join("report.json")).map_err(|e| e.to_string())?;
        let txt = std::fs::read(out.join("report.txt")).map_err(|e| e.to_string())?;
        texts.push((json, txt));
    }
    check(texts[0].0 == texts[1].0, "report.json differs between runs")?;
    check(texts[0].1 == texts[1].1, "report.txt differs between runs")?;
    Ok(format!("two runs, report.json identical ({} bytes)", texts[0].0.len()))
}

fn repro_schema(scratch: &Path) -> Outcome {
    let weights = scratch.join("mini_resnet.json");
    let mut cfg = Config {
        mode: Mode::Repro,
        ..reduced_config()
    };
    cfg.data.image_size = 224;
    cfg.data.synth.image_size = 224;
    cfg.data.synth.images_per_class = 40;
    let corpus = scratch.join("corpus");
    write_corpus(&corpus, &cfg.data.synth).map_err(|e| e.to_string())?;
    cfg.data.root = Some(corpus);
    cfg.model.backbone = "resnet".into();
    cfg.model.split_layer = "layer4".into();
    cfg.model.weights = Some(weights.clone());
    cfg.model.sanity_floor = 0.0;
    cfg.concepts.k = 4;
    cfg.concepts.min_set_size = 4;
    cfg.attack.max_images = Some(4);
    cfg.validate().map_err(|e| e.to_string())?;
    let mut without_weights = cfg.clone();
    without_weights.model.weights = None;
    check(without_weights.validate().is_err(), "repro mode accepted a config without weights")?;

    let mut p = Pipeline::new(cfg.clone(), scratch.join("out"), false).map_err(|e| e.to_string())?;
    let images = p.split(Split::ConceptBuild).map_err(|e| e.to_string())?;
    let layout = ResnetConfig {
        blocks: [1, 1, 1, 1],
        base_width: 4,
        stem_width: 8,
    };
    let mut net = resnet(&layout, 2, 224, 21);
    let train_cfg = TrainConfig {
        epochs: 8,
        batch_size: 8,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    train(&mut net, &images, &cfg.preprocessing(), &train_cfg).map_err(|e| e.to_string())?;
    net.save(&weights).map_err(|e| e.to_string())?;
    let report = p.run_comparison().map_err(|e| e.to_string())?;

    check(report.mode == Mode::Repro, "report is not tagged repro")?;
    for name in [UNDEFENDED, PATCHCLEANSER, OURS] {
        let row = report.row(name).ok_or(format!("missing row {name}"))?;
        check(row.robust.len() == 3, format!("{name}: {} robust columns", row.robust.len()))?;
        check(row.clean.total > 0, format!("{name}: empty clean column"))?;
    }
    check(report.areas == vec![0.01, 0.02, 0.03], "areas are not 1/2/3%")?;
    check(
        report.attacks.iter().map(|a| a.patch_side).eq([22, 32, 39]),
        format!("patch sides {:?}", report.attacks.iter().map(|a| a.patch_side).collect::<Vec<_>>()),
    )?;
    let text = std::fs::read_to_string(scratch.join("out/report.txt")).map_err(|e| e.to_string())?;
    check(text.contains("repro"), "text report does not name the mode")?;
    Ok("224px residual backbone, 3 rows x (clean + 1/2/3%) emitted".into())
}

fn main() {
    // Optional name filters, e.g. `cargo test --test acceptance -- repro`.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let scratch = tempfile::tempdir().expect("scratch dir");
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut number = 0;
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        number += 1;
        if !wanted(name) {
            return;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let tag = if outcome.is_ok() { "PASS" } else { "FAIL" };
        let detail = outcome.as_ref().unwrap_or_else(|e| e);
        println!("criterion {number}: {tag} {name}: {detail}");
        results.push((name, outcome));
    };
    run("nmf monotonicity", &mut nmf_monotone);
    run("sobol oracle", &mut sobol_oracle);
    run("top-n selection", &mut top_n_oracle);
    run("identity defenses", &mut identity_defenses);
    run("double masking", &mut double_masking);
    let desk = if wanted("desk end to end") || wanted("sweep trends") {
        catch_unwind(AssertUnwindSafe(|| desk_end_to_end(&scratch.path().join("desk")))).unwrap_or_else(|_| DeskRun {
            comparison: Err("desk run panicked".into()),
            sweeps: Err("desk run panicked".into()),
        })
    } else {
        DeskRun {
            comparison: Err("skipped".into()),
            sweeps: Err("skipped".into()),
        }
    };
    let DeskRun { comparison, sweeps } = desk;
    let mut comparison = Some(comparison);
    let mut sweeps = Some(sweeps);
    run("desk end to end", &mut || comparison.take().unwrap());
    run("sweep trends", &mut || sweeps.take().unwrap());
    run("determinism", &mut || determinism(&scratch.path().join("det")));
    run("repro schema", &mut || repro_schema(&scratch.path().join("repro")));
    let failed = results.iter().filter(|(_, o)| o.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
