mod common;

use conceptshield::attack::{optimize_patch, LocationPolicy, PatchSpec};
use conceptshield::concepts::{extract_concept_bank, ExtractionConfig};
use conceptshield::data::synth::{render, SynthConfig};
use conceptshield::data::{build_class_conditioned_sets, ClassConditionedSet};
use conceptshield::defense::{coefficient_maps, upsample, Upsampling};
use conceptshield::error::Error;
use conceptshield::eval::config::Config;
use conceptshield::eval::figures::{cell_origin, render_grid};
use conceptshield::image::Image;
use conceptshield::importance::NnlsSolver;
use conceptshield::model::layers::Layer;
use conceptshield::model::{ClassifierAdapter, LossSpec, Network};
use conceptshield::image::Preprocessing;
use ndarray::{Array1, Array2, Array3};
use rand::Rng;

use common::{random_image, rng, tiny_adapter, workspace_root};

/// Desk CNN whose head ignores its input and always predicts `class`.
fn constant_classifier(classes: usize, class: usize) -> ClassifierAdapter {
    let mut net = Network::desk_cnn(classes, [4, 4, 8, 8, 8], 64, 1);
    let head = net.stages.last_mut().unwrap();
    for layer in &mut head.layers {
        if let Layer::Linear(lin) = layer {
            lin.weight.fill(0.0);
            lin.bias = Array1::from_shape_fn(classes, |c| if c == class { 1.0 } else { 0.0 });
        }
    }
    let names = (0..classes).map(|c| format!("c{c}")).collect();
    ClassifierAdapter::new(net, "block5", Preprocessing::desk(), names).unwrap()
}

#[test]
fn class_conditioned_sets_keep_only_agreeing_images() {
    let images: Vec<Image> = (0..12).map(|i| random_image(&format!("i{i}"), i % 3, i as u64)).collect();
    let adapter = constant_classifier(3, 1);
    let sets = build_class_conditioned_sets(&images, &adapter, 0, None).unwrap();
    assert_eq!(sets.iter().map(ClassConditionedSet::size).collect::<Vec<_>>(), vec![0, 4, 0]);
    assert!(sets[1].images.iter().all(|img| img.label() == 1));

    // Every image predicted correctly: the sets are the label groups, capped in order.
    let ones: Vec<Image> = images.iter().filter(|i| i.label() == 1).cloned().collect();
    let sets = build_class_conditioned_sets(&ones, &adapter, 0, Some(3)).unwrap();
    let ids: Vec<&str> = sets[1].images.iter().map(Image::id).collect();
    assert_eq!(ids, vec!["i1", "i4", "i7"]);

    let err = build_class_conditioned_sets(&images, &adapter, 2, None).unwrap_err();
    assert!(matches!(err, Error::Input(msg) if msg.contains("c0") && msg.contains("c2")));
}

#[test]
fn input_gradient_matches_finite_differences() {
    let adapter = tiny_adapter(3, 4);
    let img = random_image("g", 0, 9);
    let loss = LossSpec::Untargeted { label: 2 };
    let (grad, value, _) = adapter.input_gradient(img.pixels(), loss).unwrap();
    let loss_at = |px: &Array3<f64>| {
        let (_, v, _) = adapter.input_gradient(px.view(), loss).unwrap();
        v
    };
    assert!((loss_at(&img.pixels().to_owned()) - value).abs() < 1e-12);
    let mut r = rng(2);
    let h = 1e-7;
    for _ in 0..20 {
        let idx = (r.gen_range(0..3), r.gen_range(0..64), r.gen_range(0..64));
        let mut plus = img.pixels().to_owned();
        let mut minus = plus.clone();
        plus[idx] += h;
        minus[idx] -= h;
        let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        let an = grad[idx];
        assert!(
            (fd - an).abs() <= 1e-2 * an.abs().max(fd.abs()) + 1e-7,
            "{idx:?}: analytic {an}, numeric {fd}"
        );
    }
}

/// Projected gradient descent on ½‖Wᵀu − a‖², run to convergence.
fn projected_gradient(w: &Array2<f64>, a: &Array1<f64>) -> Array1<f64> {
    let gram = w.dot(&w.t());
    let b = w.dot(a);
    let lipschitz = gram.iter().map(|v| v.abs()).sum::<f64>();
    let mut u = Array1::<f64>::zeros(w.nrows());
    for _ in 0..200_000 {
        let g = gram.dot(&u) - &b;
        u = (&u - &(g / lipschitz)).mapv(|v| v.max(0.0));
    }
    u
}

#[test]
fn nnls_agrees_with_projected_gradient() {
    let mut r = rng(5);
    for case in 0..10 {
        let k = r.gen_range(2..6);
        let c = r.gen_range(k..12);
        let w = Array2::from_shape_fn((k, c), |_| r.gen::<f64>());
        let a = Array1::from_shape_fn(c, |_| r.gen::<f64>() - 0.3);
        let fast = NnlsSolver::new(w.view()).solve(a.view());
        let slow = projected_gradient(&w, &a);
        let objective = |u: &Array1<f64>| {
            let d = w.t().dot(u) - &a;
            d.dot(&d)
        };
        assert!(fast.iter().all(|&v| v >= 0.0));
        assert!(objective(&fast) <= objective(&slow) + 1e-9, "case {case}");
        assert!((&fast - &slow).iter().all(|d| d.abs() < 1e-5), "case {case}: {fast} vs {slow}");
    }
}

#[test]
fn planted_concept_lights_up_its_cell() {
    let w = Array2::from_shape_vec((3, 4), vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.6, 0.8]).unwrap();
    let solver = NnlsSolver::new(w.view());
    let mut act = Array3::<f64>::zeros((4, 8, 8));
    act[[2, 5, 3]] = 1.2;
    act[[3, 5, 3]] = 1.6;
    act[[0, 1, 6]] = 0.7;
    let maps = coefficient_maps(&act, &solver);
    assert!((maps[[2, 5, 3]] - 2.0).abs() < 1e-9);
    assert!((maps[[0, 1, 6]] - 0.7).abs() < 1e-9);
    let total: f64 = maps.iter().sum();
    assert!((total - 2.7).abs() < 1e-9);

    let heat = upsample(&maps.slice(ndarray::s![2, .., ..]).to_owned(), 64, 64, Upsampling::Bilinear);
    let (mut best, mut at) = (f64::MIN, (0, 0));
    for ((y, x), &v) in heat.indexed_iter() {
        if v > best {
            best = v;
            at = (y, x);
        }
    }
    assert!((40..48).contains(&at.0) && (24..32).contains(&at.1), "peak at {at:?}");
}

#[test]
fn bilinear_upsampling_matches_direct_formula() {
    let mut r = rng(8);
    let map = Array2::from_shape_fn((5, 7), |_| r.gen::<f64>());
    let (oh, ow) = (23, 31);
    let up = upsample(&map, oh, ow, Upsampling::Bilinear);
    for y in 0..oh {
        for x in 0..ow {
            let sy = ((y as f64 + 0.5) * 5.0 / oh as f64 - 0.5).clamp(0.0, 4.0);
            let sx = ((x as f64 + 0.5) * 7.0 / ow as f64 - 0.5).clamp(0.0, 6.0);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(4), (x0 + 1).min(6));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let v = map[[y0, x0]] * (1.0 - fy) * (1.0 - fx)
                + map[[y0, x1]] * (1.0 - fy) * fx
                + map[[y1, x0]] * fy * (1.0 - fx)
                + map[[y1, x1]] * fy * fx;
            assert!((up[[y, x]] - v).abs() < 1e-12);
        }
    }
    let nearest = upsample(&map, 10, 14, Upsampling::Nearest);
    assert_eq!(nearest[[9, 13]], map[[4, 6]]);
    assert_eq!(nearest[[0, 1]], map[[0, 0]]);
}

#[test]
fn bank_metadata_replays_the_extraction() {
    let adapter = tiny_adapter(2, 3);
    let synth = SynthConfig::default();
    let set = ClassConditionedSet {
        class_id: 1,
        images: (0..6)
            .map(|i| Image::new(format!("b{i}"), 1, render(&synth, 1, i)).unwrap())
            .collect(),
    };
    let cfg = ExtractionConfig::new(3, 64, 17);
    let bank = extract_concept_bank(&set, &adapter, &cfg).unwrap();
    assert_eq!(bank.metadata.image_ids.len(), 6);
    assert_eq!(bank.metadata.n_crops, 54);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.json");
    bank.save(&path).unwrap();
    let loaded = conceptshield::concepts::ConceptBank::load(&path).unwrap();
    assert_eq!(loaded, bank);
    let replay = extract_concept_bank(&set, &adapter, &loaded.metadata.extraction_config()).unwrap();
    assert_eq!(replay.w, bank.w);
    for row in bank.w.rows() {
        assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn attack_is_deterministic_and_local() {
    let adapter = tiny_adapter(3, 6);
    let img = random_image("a", 0, 77);
    let spec = PatchSpec {
        steps: 20,
        ..PatchSpec::new(0.02, 5)
    };
    let first = optimize_patch(&adapter, &img, &spec).unwrap();
    let second = optimize_patch(&adapter, &img, &spec).unwrap();
    assert_eq!(first, second);
    assert_eq!(first.side(), 9);
    let patched = first.patched_image(&img).unwrap();
    let (top, left) = first.location;
    for ((c, y, x), &v) in patched.pixels().indexed_iter() {
        let inside = (top..top + 9).contains(&y) && (left..left + 9).contains(&x);
        if inside {
            assert_eq!(v, first.patch[[c, y - top, x - left]]);
        } else {
            assert_eq!(v.to_bits(), img.pixels()[[c, y, x]].to_bits());
        }
    }
    let fixed = PatchSpec {
        location: LocationPolicy::Fixed { row: 50, col: 60 },
        ..spec
    };
    assert!(optimize_patch(&adapter, &img, &fixed).is_err());
}

#[test]
fn shipped_configs_parse_and_validate() {
    let desk = Config::load(&workspace_root().join("configs/desk.toml")).unwrap();
    desk.validate().unwrap();
    assert_eq!(desk.defense.m, 2);
    assert_eq!(desk.attack.areas, vec![0.01, 0.02, 0.03]);
    let repro = Config::load(&workspace_root().join("configs/repro.toml")).unwrap();
    assert_eq!(repro.data.image_size, 224);
    assert_eq!(repro.model.split_layer, "layer4");
    assert_eq!(repro.model.output_indices.as_ref().map(Vec::len), Some(10));
}

#[test]
fn figure_grid_matches_a_pixel_oracle() {
    let a = Image::new("a", 0, Array3::from_elem((3, 64, 64), 1.0)).unwrap();
    let b = Image::new("b", 0, Array3::from_shape_fn((3, 64, 64), |(c, y, x)| ((c + y + x) % 5) as f64 / 4.0)).unwrap();
    let cells = vec![vec![Some(a.clone()), None], vec![Some(b.clone())]];
    let canvas = render_grid(&cells).unwrap();
    assert_eq!(canvas.dimensions(), (2 * 64 + 3 * 2, 2 * 64 + 3 * 2));
    let mut expected = image::RgbImage::from_pixel(134, 134, image::Rgb([255, 255, 255]));
    for (row, col, tile) in [(0, 0, Some(&a)), (0, 1, None), (1, 0, Some(&b)), (1, 1, None)] {
        let (y0, x0) = cell_origin(row, col, 64);
        for y in 0..64 {
            for x in 0..64 {
                let px = match tile {
                    Some(img) => {
                        let p = |c: usize| (img.pixels()[[c, y, x]] * 255.0).round() as u8;
                        image::Rgb([p(0), p(1), p(2)])
                    }
                    None => image::Rgb([128, 128, 128]),
                };
                expected.put_pixel((x0 + x) as u32, (y0 + y) as u32, px);
            }
        }
    }
    assert!(canvas == expected);
    assert!(render_grid(&[]).is_err());
}
