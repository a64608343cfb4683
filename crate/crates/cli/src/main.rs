use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use conceptshield::attack::{build_attacked_set, AttackedSet};
use conceptshield::baseline::{build_mask_set, double_masked_predict};
use conceptshield::concepts::{extract_concept_bank, ConceptBank};
use conceptshield::data::synth::{write_corpus, SynthConfig};
use conceptshield::data::{build_class_conditioned_sets, ingest_dataset, DatasetManifest, Split};
use conceptshield::defense::{defend, ConceptLibrary};
use conceptshield::eval::{Config, Mode, Pipeline, SweepAxis};
use conceptshield::image::{load_image, Image};
use conceptshield::importance::{score_concepts, ImportanceScores};
use conceptshield::model::{load_classifier, train, ClassifierAdapter, Network};
use conceptshield::store::write_json;
use conceptshield::{Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "conceptshield", version, about = "Concept-guided adversarial patch defense and its evaluation harness")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Desk,
    Repro,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    N,
    M,
}

#[derive(Subcommand)]
enum Command {
    /// Write the procedural shapes corpus.
    SynthCorpus {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Enumerate a class-per-directory image tree and assign splits.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Train the desk CNN on the concept-build split.
    TrainDeskModel {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Factorise crop activations into per-class concept banks.
    ExtractConcepts {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        split_layer: Option<String>,
    },
    /// Rank each bank's concepts by total Sobol index.
    ScoreConcepts {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        banks: PathBuf,
        #[arg(long)]
        designs: Option<usize>,
        #[arg(long)]
        split_layer: Option<String>,
    },
    /// Optimise per-image patches on the attack-eval split.
    Attack {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        area: f64,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Defend every image of a directory.
    Defend {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        banks: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        n: Option<f64>,
        #[arg(long = "in")]
        input: PathBuf,
        /// Also write the blurred-pixel masks.
        #[arg(long)]
        emit_masks: bool,
    },
    /// Double-masking baseline predictions for every image of a directory.
    BaselinePc {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        masks_per_axis: Option<usize>,
        #[arg(long)]
        patch_side: usize,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Build or reuse every artifact and write the comparison report.
    Evaluate {
        #[arg(long)]
        strict: bool,
    },
    /// Vary one defense hyperparameter with the other fixed.
    Sweep {
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long)]
        strict: bool,
    },
    /// Grid of defended patched images.
    Figures {
        #[arg(long)]
        strict: bool,
    },
}

fn config(global: &Global) -> Result<Config> {
    let mut cfg = match &global.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = global.mode {
        cfg.mode = match mode {
            ModeArg::Desk => Mode::Desk,
            ModeArg::Repro => Mode::Repro,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out(global: &Global, default: &str) -> PathBuf {
    global.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn classifier(cfg: &Config, manifest: &DatasetManifest, weights: &Path) -> Result<ClassifierAdapter> {
    load_classifier(
        &cfg.model_spec(weights.to_path_buf()),
        manifest.preprocessing.clone(),
        manifest.classes.clone(),
    )
}

/// Images of a flat directory in file-name order, labelled 0.
fn images_in(dir: &Path, size: usize) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Input(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            load_image(p, id, 0, size)
        })
        .collect()
}

#[derive(Serialize)]
struct Labelled {
    id: String,
    predicted: usize,
    defended: usize,
    masked_pixels: usize,
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut cfg = config(g)?;
    match cli.command {
        Command::SynthCorpus { classes, per_class } => {
            let synth = SynthConfig {
                classes: classes.unwrap_or(cfg.data.synth.classes),
                images_per_class: per_class.unwrap_or(cfg.data.synth.images_per_class),
                ..cfg.data.synth.clone()
            };
            let dir = out(g, "corpus");
            write_corpus(&dir, &synth)?;
            println!("wrote {} images to {}", synth.classes * synth.images_per_class, dir.display());
        }
        Command::Ingest { root, image_size } => {
            if let Some(size) = image_size {
                cfg.data.image_size = size;
            }
            let manifest = ingest_dataset(&root, &cfg.ingest_config())?;
            let path = out(g, "manifest.json");
            manifest.save(&path)?;
            for split in [Split::ConceptBuild, Split::AttackEval, Split::CleanEval] {
                println!("{split:?}: {}", manifest.split_len(split));
            }
        }
        Command::TrainDeskModel { manifest, epochs } => {
            let manifest = DatasetManifest::load(&manifest)?;
            let images = manifest.load_split(Split::ConceptBuild)?;
            let mut net = Network::desk_cnn(
                manifest.classes.len(),
                cfg.model.widths,
                manifest.preprocessing.image_size,
                cfg.init_seed(),
            );
            let mut train_cfg = cfg.train_config();
            if let Some(e) = epochs {
                train_cfg.epochs = e;
            }
            for stats in train(&mut net, &images, &manifest.preprocessing, &train_cfg)? {
                println!("{stats:?}");
            }
            net.save(&out(g, "model.json"))?;
        }
        Command::ExtractConcepts { manifest, model, k, split_layer } => {
            if let Some(k) = k {
                cfg.concepts.k = k;
            }
            if let Some(l) = split_layer {
                cfg.model.split_layer = l;
            }
            let manifest = DatasetManifest::load(&manifest)?;
            let adapter = classifier(&cfg, &manifest, &model)?;
            let images = manifest.load_split(Split::ConceptBuild)?;
            let sets = build_class_conditioned_sets(
                &images,
                &adapter,
                cfg.concepts.min_set_size,
                cfg.concepts.max_images_per_class,
            )?;
            let dir = out(g, "banks");
            for set in &sets {
                let bank = extract_concept_bank(set, &adapter, &cfg.extraction_config())?;
                println!("class {}: relative error {:.4}", set.class_id, bank.metadata.final_error);
                bank.save(&dir.join(ConceptBank::file_name(set.class_id)))?;
            }
        }
        Command::ScoreConcepts { manifest, model, banks, designs, split_layer } => {
            if let Some(d) = designs {
                cfg.importance.designs = d;
            }
            if let Some(l) = split_layer {
                cfg.model.split_layer = l;
            }
            let manifest = DatasetManifest::load(&manifest)?;
            let adapter = classifier(&cfg, &manifest, &model)?;
            let images = manifest.load_split(Split::ConceptBuild)?;
            let sets = build_class_conditioned_sets(
                &images,
                &adapter,
                cfg.concepts.min_set_size,
                cfg.concepts.max_images_per_class,
            )?;
            let dir = out(g, "scores");
            for set in &sets {
                let bank = ConceptBank::load(&banks.join(ConceptBank::file_name(set.class_id)))?;
                let scores = score_concepts(&adapter, &bank, set, &cfg.scoring_config())?;
                println!("class {}: ranking {:?}", set.class_id, scores.ranking);
                scores.save(&dir.join(ImportanceScores::file_name(set.class_id)))?;
            }
        }
        Command::Attack { manifest, model, area, steps } => {
            if let Some(s) = steps {
                cfg.attack.steps = s;
            }
            let manifest = DatasetManifest::load(&manifest)?;
            let adapter = classifier(&cfg, &manifest, &model)?;
            let images = manifest.load_split(Split::AttackEval)?;
            let set: AttackedSet = build_attacked_set(&adapter, &images, &cfg.patch_spec(area))?;
            set.save(&out(g, "attacked.json"))?;
            println!("{}/{} attacks succeeded", set.len(), set.metadata.attempted);
        }
        Command::Defend { manifest, model, banks, scores, m, n, input, emit_masks } => {
            let manifest = DatasetManifest::load(&manifest)?;
            let adapter = classifier(&cfg, &manifest, &model)?;
            let library = ConceptLibrary::load(&banks, &scores, adapter.num_classes())?;
            let dcfg = cfg.defense_with(m.unwrap_or(cfg.defense.m), n.unwrap_or(cfg.defense.n_percent));
            let dir = out(g, "defended");
            let mut records = Vec::new();
            for img in images_in(&input, adapter.input_size())? {
                let outcome = defend(&adapter, &img, &library, &dcfg)?;
                outcome.defended.save_png(&dir.join(format!("{}.png", img.id())))?;
                if emit_masks {
                    let px = outcome.mask.mask.mapv(|v| if v { 1.0 } else { 0.0 });
                    let stacked = ndarray::stack(ndarray::Axis(0), &[px.view(), px.view(), px.view()])
                        .map_err(|e| Error::Input(e.to_string()))?;
                    conceptshield::image::save_png(stacked.view(), &dir.join(format!("{}_mask.png", img.id())))?;
                }
                records.push(Labelled {
                    id: img.id().to_string(),
                    predicted: outcome.predicted,
                    defended: outcome.label,
                    masked_pixels: outcome.mask.selected(),
                });
            }
            write_json(&dir.join("labels.json"), &records)?;
            println!("defended {} images", records.len());
        }
        Command::BaselinePc { manifest, model, masks_per_axis, patch_side, input, report } => {
            let manifest = DatasetManifest::load(&manifest)?;
            let adapter = classifier(&cfg, &manifest, &model)?;
            let size = adapter.input_size();
            let masks = build_mask_set(
                size,
                size,
                masks_per_axis.unwrap_or(cfg.baseline.masks),
                cfg.baseline.count,
                patch_side,
                adapter.neutral_fill(),
            )?;
            let mut rows = Vec::new();
            for img in images_in(&input, size)? {
                let label = double_masked_predict(&adapter, &img, &masks)?;
                rows.push(serde_json::json!({ "id": img.id(), "label": label }));
            }
            write_json(&report, &serde_json::json!({ "mask_set": masks, "predictions": rows }))?;
        }
        Command::Evaluate { strict } => {
            let mut p = Pipeline::new(cfg, out(g, "run"), strict)?;
            let report = p.run_comparison()?;
            print!("{}", report.to_text());
        }
        Command::Sweep { axis, strict } => {
            let mut p = Pipeline::new(cfg, out(g, "run"), strict)?;
            let axis = match axis {
                AxisArg::N => SweepAxis::NPercent,
                AxisArg::M => SweepAxis::M,
            };
            print!("{}", p.run_sweep(axis)?.to_text());
        }
        Command::Figures { strict } => {
            let mut p = Pipeline::new(cfg, out(g, "run"), strict)?;
            let path = p.figures()?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}
