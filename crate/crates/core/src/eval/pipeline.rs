//! Stage orchestration with fingerprinted, cached artifacts under one output directory.
//!
//! Each stage records a key derived from its configuration and the keys of the
//! stages it depends on. A stored artifact is reused only when its key matches;
//! otherwise it is rebuilt, or reported as stale in strict mode.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use super::config::{Config, Mode};
use super::defenses::{ConceptDefense, PatchCleanser, PlanCache, Undefended};
use super::figures::emit_figure;
use super::metrics::{metric_clean, metric_robust, Cell, Defense};
use super::report::{
    AttackSummary, BaselineSummary, EvaluationReport, ReportRow, SweepAxis, SweepReport, SweepRow,
};
use crate::attack::{build_attacked_set, AttackedSet};
use crate::baseline::build_mask_set;
use crate::concepts::{extract_concept_bank, ConceptBank};
use crate::data::synth::write_corpus;
use crate::data::{build_class_conditioned_sets, ingest_dataset, DatasetManifest, Split};
use crate::defense::{ConceptLibrary, DefenseConfig, DefensePlan};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::importance::{score_concepts, ImportanceScores};
use crate::model::{load_classifier, sanity_accuracy, train, ClassifierAdapter, Network};
use crate::store::{read_json, write_bytes, write_json};
use crate::util::{fingerprint, fingerprint_bytes};

pub const UNDEFENDED: &str = "undefended";
pub const PATCHCLEANSER: &str = "patchcleanser";
pub const OURS: &str = "ours";

/// SHA-256 over every entry's id, label, split and file bytes.
pub fn corpus_fingerprint(manifest: &DatasetManifest) -> Result<String> {
    let mut parts = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let path = Path::new(&manifest.root).join(&e.path);
        let bytes = std::fs::read(&path).map_err(|err| Error::io(&path, err))?;
        parts.push((e.id.clone(), e.label, e.split, fingerprint_bytes(&bytes)));
    }
    Ok(fingerprint(&(&manifest.classes, &manifest.preprocessing, parts)))
}

fn key_of<T: Serialize + ?Sized>(value: &T) -> String {
    fingerprint(value)
}

fn area_tag(area: f64) -> String {
    format!("area_{:04}", (area * 10_000.0).round() as u64)
}

struct Stage<T> {
    value: Arc<T>,
    key: String,
}

impl<T> Clone for Stage<T> {
    fn clone(&self) -> Self {
        Stage {
            value: Arc::clone(&self.value),
            key: self.key.clone(),
        }
    }
}

pub struct Pipeline {
    pub config: Config,
    pub out: PathBuf,
    /// Fail instead of rebuilding when a stored artifact's key is stale.
    pub strict: bool,
    stamps: BTreeMap<String, String>,
    manifest: Option<Stage<DatasetManifest>>,
    splits: BTreeMap<&'static str, Arc<Vec<Image>>>,
    model: Option<Stage<ClassifierAdapter>>,
    library: Option<Stage<ConceptLibrary>>,
    attacks: BTreeMap<String, Stage<AttackedSet>>,
    plans: BTreeMap<String, Arc<PlanCache>>,
}

impl Pipeline {
    pub fn new(config: Config, out: impl Into<PathBuf>, strict: bool) -> Result<Self> {
        config.validate()?;
        let out = out.into();
        let stamps_path = out.join("stamps.json");
        let stamps = if stamps_path.exists() {
            read_json(&stamps_path)?
        } else {
            BTreeMap::new()
        };
        Ok(Pipeline {
            config,
            out,
            strict,
            stamps,
            manifest: None,
            splits: BTreeMap::new(),
            model: None,
            library: None,
            attacks: BTreeMap::new(),
            plans: BTreeMap::new(),
        })
    }

    /// Whether the stored artifact for `stage` can be reused under `key`.
    fn is_fresh(&self, stage: &str, key: &str, paths: &[PathBuf]) -> Result<bool> {
        match self.stamps.get(stage) {
            Some(found) if found == key => Ok(paths.iter().all(|p| p.exists())),
            Some(found) if self.strict => Err(Error::Stale {
                path: self.out.join(stage),
                expected: key.to_string(),
                found: found.clone(),
            }),
            Some(_) => {
                log::info!("{stage}: upstream changed, rebuilding");
                Ok(false)
            }
            None => Ok(false),
        }
    }

    fn record(&mut self, stage: &str, key: &str) -> Result<()> {
        self.stamps.insert(stage.to_string(), key.to_string());
        write_json(&self.out.join("stamps.json"), &self.stamps)
    }

    fn corpus_root(&mut self) -> Result<PathBuf> {
        if let Some(root) = &self.config.data.root {
            return Ok(root.clone());
        }
        if self.config.mode == Mode::Repro {
            return Err(Error::Config("repro mode needs data.root".into()));
        }
        let root = self.out.join("corpus");
        let key = key_of(&self.config.data.synth);
        if !self.is_fresh("corpus", &key, std::slice::from_ref(&root))? {
            if root.exists() {
                std::fs::remove_dir_all(&root).map_err(|e| Error::io(&root, e))?;
            }
            log::info!("writing synthetic corpus to {}", root.display());
            write_corpus(&root, &self.config.data.synth)?;
            self.record("corpus", &key)?;
        }
        Ok(root)
    }

    fn manifest_stage(&mut self) -> Result<Stage<DatasetManifest>> {
        if let Some(s) = &self.manifest {
            return Ok(s.clone());
        }
        let root = self.corpus_root()?;
        let manifest = ingest_dataset(&root, &self.config.ingest_config())?;
        manifest.save(&self.out.join("manifest.json"))?;
        let key = corpus_fingerprint(&manifest)?;
        let stage = Stage {
            value: Arc::new(manifest),
            key,
        };
        self.manifest = Some(stage.clone());
        Ok(stage)
    }

    pub fn manifest(&mut self) -> Result<Arc<DatasetManifest>> {
        Ok(self.manifest_stage()?.value)
    }

    pub fn corpus_key(&mut self) -> Result<String> {
        Ok(self.manifest_stage()?.key)
    }

    pub fn split(&mut self, split: Split) -> Result<Arc<Vec<Image>>> {
        let name = match split {
            Split::ConceptBuild => "concept-build",
            Split::AttackEval => "attack-eval",
            Split::CleanEval => "clean-eval",
        };
        if let Some(images) = self.splits.get(name) {
            return Ok(Arc::clone(images));
        }
        let images = Arc::new(self.manifest()?.load_split(split)?);
        self.splits.insert(name, Arc::clone(&images));
        Ok(images)
    }

    fn model_stage(&mut self) -> Result<Stage<ClassifierAdapter>> {
        if let Some(s) = &self.model {
            return Ok(s.clone());
        }
        let manifest = self.manifest()?;
        let corpus = self.corpus_key()?;
        let cfg = &self.config;
        let (weights, key) = match &cfg.model.weights {
            Some(path) => {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                let key = key_of(&(&cfg.model, fingerprint_bytes(&bytes), &manifest.preprocessing));
                (path.clone(), key)
            }
            None => {
                if cfg.model.backbone != "desk-cnn" {
                    return Err(Error::Config(format!(
                        "backbone {} cannot be trained here; set model.weights",
                        cfg.model.backbone
                    )));
                }
                let path = self.out.join("model.json");
                let key = key_of(&(&corpus, &cfg.model, cfg.train_config(), cfg.init_seed()));
                if !self.is_fresh("model", &key, std::slice::from_ref(&path))? {
                    let images = self.split(Split::ConceptBuild)?;
                    let cfg = &self.config;
                    let mut net = Network::desk_cnn(
                        manifest.classes.len(),
                        cfg.model.widths,
                        manifest.preprocessing.image_size,
                        cfg.init_seed(),
                    );
                    log::info!("training the desk classifier on {} images", images.len());
                    let history = train(&mut net, &images, &manifest.preprocessing, &cfg.train_config())?;
                    if let Some(last) = history.last() {
                        log::info!("final epoch: {last:?}");
                    }
                    net.save(&path)?;
                    self.record("model", &key)?;
                }
                (path, key)
            }
        };
        let spec = self.config.model_spec(weights);
        let adapter = load_classifier(&spec, manifest.preprocessing.clone(), manifest.classes.clone())?;
        let clean = self.split(Split::CleanEval)?;
        let acc = sanity_accuracy(&adapter, &clean, self.config.model.sanity_floor)?;
        log::info!("clean-eval accuracy {acc:.4}");
        let stage = Stage {
            value: Arc::new(adapter),
            key,
        };
        self.model = Some(stage.clone());
        Ok(stage)
    }

    pub fn adapter(&mut self) -> Result<Arc<ClassifierAdapter>> {
        Ok(self.model_stage()?.value)
    }

    fn library_stage(&mut self) -> Result<Stage<ConceptLibrary>> {
        if let Some(s) = &self.library {
            return Ok(s.clone());
        }
        let model = self.model_stage()?;
        let adapter = model.value;
        let classes = adapter.num_classes();
        let banks_dir = self.out.join("banks");
        let scores_dir = self.out.join("scores");
        let ext = self.config.extraction_config();
        let scoring = self.config.scoring_config();
        let banks_key = key_of(&(
            &model.key,
            &ext,
            self.config.concepts.min_set_size,
            self.config.concepts.max_images_per_class,
        ));
        let scores_key = key_of(&(&banks_key, &scoring));
        let bank_paths: Vec<PathBuf> = (0..classes).map(|c| banks_dir.join(ConceptBank::file_name(c))).collect();
        let score_paths: Vec<PathBuf> = (0..classes)
            .map(|c| scores_dir.join(ImportanceScores::file_name(c)))
            .collect();

        let banks_fresh = self.is_fresh("banks", &banks_key, &bank_paths)?;
        let scores_fresh = banks_fresh && self.is_fresh("scores", &scores_key, &score_paths)?;
        if !scores_fresh {
            let images = self.split(Split::ConceptBuild)?;
            let sets = build_class_conditioned_sets(
                &images,
                &adapter,
                self.config.concepts.min_set_size,
                self.config.concepts.max_images_per_class,
            )?;
            let banks: Vec<ConceptBank> = if banks_fresh {
                bank_paths.iter().map(|p| ConceptBank::load(p)).collect::<Result<_>>()?
            } else {
                let banks: Vec<ConceptBank> = sets
                    .iter()
                    .map(|s| extract_concept_bank(s, &adapter, &ext))
                    .collect::<Result<_>>()?;
                for (b, p) in banks.iter().zip(&bank_paths) {
                    b.save(p)?;
                }
                self.record("banks", &banks_key)?;
                banks
            };
            for ((bank, set), path) in banks.iter().zip(&sets).zip(&score_paths) {
                let scores = score_concepts(&adapter, bank, set, &scoring)?;
                log::info!("class {}: concept ranking {:?}", set.class_id, scores.ranking);
                scores.save(path)?;
            }
            self.record("scores", &scores_key)?;
        }
        let library = ConceptLibrary::load(&banks_dir, &scores_dir, classes)?;
        let stage = Stage {
            value: Arc::new(library),
            key: scores_key,
        };
        self.library = Some(stage.clone());
        Ok(stage)
    }

    pub fn library(&mut self) -> Result<Arc<ConceptLibrary>> {
        Ok(self.library_stage()?.value)
    }

    pub fn attack_path(&self, area: f64) -> PathBuf {
        self.out.join("attacks").join(format!("{}.json", area_tag(area)))
    }

    fn attack_stage(&mut self, area: f64) -> Result<Stage<AttackedSet>> {
        let tag = area_tag(area);
        if let Some(s) = self.attacks.get(&tag) {
            return Ok(s.clone());
        }
        let model = self.model_stage()?;
        let spec = self.config.patch_spec(area);
        let max = self.config.attack.max_images;
        let key = key_of(&(&model.key, &spec, max));
        let path = self.attack_path(area);
        let set = if self.is_fresh(&tag, &key, std::slice::from_ref(&path))? {
            AttackedSet::load(&path)?
        } else {
            let images = self.split(Split::AttackEval)?;
            let images = &images[..max.unwrap_or(images.len()).min(images.len())];
            let set = build_attacked_set(&model.value, images, &spec)?;
            set.save(&path)?;
            self.record(&tag, &key)?;
            set
        };
        let stage = Stage {
            value: Arc::new(set),
            key,
        };
        self.attacks.insert(tag, stage.clone());
        Ok(stage)
    }

    pub fn attacked_set(&mut self, area: f64) -> Result<Arc<AttackedSet>> {
        Ok(self.attack_stage(area)?.value)
    }

    /// Patched images of the attacked set at `area`, in result order.
    pub fn patched_images(&mut self, area: f64) -> Result<Vec<Image>> {
        let set = self.attacked_set(area)?;
        let images = self.split(Split::AttackEval)?;
        set.patched_images(&images)
    }

    fn plan_cache(&mut self, group: &str, images: &[Image]) -> Result<Arc<PlanCache>> {
        if let Some(c) = self.plans.get(group) {
            return Ok(Arc::clone(c));
        }
        let adapter = self.adapter()?;
        let library = self.library()?;
        let cache = Arc::new(PlanCache::build(&adapter, images, &library, &self.config.defense_config())?);
        self.plans.insert(group.to_string(), Arc::clone(&cache));
        Ok(cache)
    }

    /// Every artifact needed by the comparison, built or loaded.
    pub fn prepare(&mut self) -> Result<()> {
        self.library()?;
        for area in self.config.attack.areas.clone() {
            self.attacked_set(area)?;
        }
        Ok(())
    }

    fn evaluation_inputs(&mut self) -> Result<EvalInputs> {
        self.prepare()?;
        let adapter = self.adapter()?;
        let clean = self.split(Split::CleanEval)?;
        let reference = clean
            .iter()
            .map(|img| adapter.predict(img).map(|p| p.label))
            .collect::<Result<Vec<_>>>()?;
        let clean_plans = self.plan_cache("clean", &clean)?;
        let mut patched = Vec::new();
        for area in self.config.attack.areas.clone() {
            let images = self.patched_images(area)?;
            let plans = self.plan_cache(&area_tag(area), &images)?;
            patched.push((images, plans));
        }
        Ok(EvalInputs {
            adapter,
            library: self.library()?,
            clean,
            reference,
            clean_plans,
            patched,
        })
    }

    fn artifact_keys(&mut self) -> Result<BTreeMap<String, String>> {
        let mut keys = BTreeMap::new();
        keys.insert("corpus".to_string(), self.corpus_key()?);
        keys.insert("model".to_string(), self.model_stage()?.key);
        keys.insert("concepts".to_string(), self.library_stage()?.key);
        for area in self.config.attack.areas.clone() {
            keys.insert(area_tag(area), self.attack_stage(area)?.key);
        }
        Ok(keys)
    }

    pub fn run_comparison(&mut self) -> Result<EvaluationReport> {
        let inputs = self.evaluation_inputs()?;
        let cfg = self.config.clone();
        let areas = cfg.attack.areas.clone();
        let size = inputs.adapter.input_size();
        let sides: Vec<usize> = areas.iter().map(|&a| cfg.patch_spec(a).side(size, size)).collect();

        let row = |name: &str, clean_def: &dyn Defense, robust_defs: Vec<&dyn Defense>| -> Result<ReportRow> {
            let robust = robust_defs
                .iter()
                .zip(&inputs.patched)
                .map(|(d, (images, _))| metric_robust(*d, images))
                .collect::<Result<_>>()?;
            Ok(ReportRow {
                defense: name.to_string(),
                clean: metric_clean(clean_def, &inputs.clean, &inputs.reference)?,
                clean_ground_truth: metric_robust(clean_def, &inputs.clean)?,
                robust,
            })
        };

        let undefended = Undefended {
            adapter: &inputs.adapter,
        };
        let fill = inputs.adapter.neutral_fill();
        let mask_set = |side: usize| {
            build_mask_set(size, size, cfg.baseline.masks, cfg.baseline.count, side, fill)
        };
        let clean_side = sides.iter().copied().max().unwrap_or(0);
        let pc_clean = PatchCleanser {
            adapter: &inputs.adapter,
            masks: mask_set(clean_side)?,
        };
        let pc_robust: Vec<PatchCleanser> = sides
            .iter()
            .map(|&s| {
                Ok(PatchCleanser {
                    adapter: &inputs.adapter,
                    masks: mask_set(s)?,
                })
            })
            .collect::<Result<_>>()?;
        let defense_cfg = cfg.defense_config();
        let ours_clean = inputs.concept_defense(defense_cfg, &inputs.clean_plans);
        let ours_robust: Vec<ConceptDefense> = inputs
            .patched
            .iter()
            .map(|(_, c)| inputs.concept_defense(defense_cfg, c))
            .collect();

        let rows = vec![
            row(UNDEFENDED, &undefended, areas.iter().map(|_| &undefended as &dyn Defense).collect())?,
            row(PATCHCLEANSER, &pc_clean, pc_robust.iter().map(|d| d as &dyn Defense).collect())?,
            row(OURS, &ours_clean, ours_robust.iter().map(|d| d as &dyn Defense).collect())?,
        ];
        let mut attacks = Vec::new();
        for (&area, &side) in areas.iter().zip(&sides) {
            let set = self.attacked_set(area)?;
            attacks.push(AttackSummary {
                area,
                patch_side: side,
                offered: set.metadata.offered,
                attempted: set.metadata.attempted,
                succeeded: set.len(),
            });
        }
        let mut patch_sides = sides.clone();
        patch_sides.push(clean_side);
        let report = EvaluationReport {
            mode: cfg.mode,
            areas,
            rows,
            attacks,
            defense: defense_cfg,
            baseline: BaselineSummary {
                masks: cfg.baseline.masks,
                count: cfg.baseline.count,
                patch_sides,
            },
            config_fingerprint: fingerprint(&cfg),
            corpus_fingerprint: self.corpus_key()?,
            artifacts: self.artifact_keys()?,
        };
        write_json(&self.out.join("report.json"), &report)?;
        write_bytes(&self.out.join("report.txt"), report.to_text().as_bytes())?;
        Ok(report)
    }

    pub fn run_sweep(&mut self, axis: SweepAxis) -> Result<SweepReport> {
        let cfg = self.config.clone();
        let (settings, fixed): (Vec<f64>, f64) = match axis {
            SweepAxis::NPercent => (cfg.sweep.n_grid.clone(), cfg.sweep.n_sweep_m as f64),
            SweepAxis::M => (cfg.sweep.m_grid.iter().map(|&m| m as f64).collect(), cfg.sweep.m_sweep_n),
        };
        if settings.is_empty() {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        let inputs = self.evaluation_inputs()?;
        let mut rows = Vec::new();
        for &setting in &settings {
            let defense_cfg: DefenseConfig = match axis {
                SweepAxis::NPercent => cfg.defense_with(cfg.sweep.n_sweep_m, setting),
                SweepAxis::M => cfg.defense_with(setting as usize, cfg.sweep.m_sweep_n),
            };
            let clean = metric_clean(
                &inputs.concept_defense(defense_cfg, &inputs.clean_plans),
                &inputs.clean,
                &inputs.reference,
            )?;
            let robust: Vec<Cell> = inputs
                .patched
                .iter()
                .map(|(images, cache)| metric_robust(&inputs.concept_defense(defense_cfg, cache), images))
                .collect::<Result<_>>()?;
            rows.push(SweepRow { setting, clean, robust });
        }
        let report = SweepReport {
            axis,
            fixed,
            areas: cfg.attack.areas.clone(),
            rows,
            config_fingerprint: fingerprint(&cfg),
        };
        let stem = match axis {
            SweepAxis::NPercent => "sweep_n",
            SweepAxis::M => "sweep_m",
        };
        write_json(&self.out.join(format!("{stem}.json")), &report)?;
        write_bytes(&self.out.join(format!("{stem}.csv")), report.to_csv().as_bytes())?;
        write_bytes(&self.out.join(format!("{stem}.txt")), report.to_text().as_bytes())?;
        Ok(report)
    }

    /// Defended patched images for the first examples attacked at every area.
    pub fn figures(&mut self) -> Result<PathBuf> {
        let areas = self.config.attack.areas.clone();
        let examples = self.config.figures.examples;
        let inputs = self.evaluation_inputs()?;
        let defense_cfg = self.config.defense_config();
        let mut ids: Vec<String> = Vec::new();
        for (images, _) in &inputs.patched {
            for img in images {
                if !ids.iter().any(|i| i == img.id()) {
                    ids.push(img.id().to_string());
                }
            }
        }
        // Prefer examples attacked at every area.
        ids.sort_by_key(|id| {
            let missing = inputs
                .patched
                .iter()
                .filter(|(images, _)| !images.iter().any(|i| i.id() == id))
                .count();
            missing
        });
        ids.truncate(examples);
        let mut cells = Vec::new();
        let mut records = Vec::new();
        for id in &ids {
            let mut row = Vec::new();
            for (col, (images, cache)) in inputs.patched.iter().enumerate() {
                let cell = match images.iter().find(|i| i.id() == id) {
                    Some(img) => {
                        let plan = match cache.get(img) {
                            Some(p) => p.clone(),
                            None => DefensePlan::new(&inputs.adapter, img, &inputs.library, defense_cfg.blur)?,
                        };
                        let outcome = plan.apply(&inputs.adapter, &defense_cfg)?;
                        records.push(FigureCell {
                            image_id: id.clone(),
                            area: areas[col],
                            true_label: img.label(),
                            attacked_label: outcome.predicted,
                            defended_label: outcome.label,
                            masked_pixels: outcome.mask.selected(),
                        });
                        Some(outcome.defended)
                    }
                    None => None,
                };
                row.push(cell);
            }
            cells.push(row);
        }
        let path = self.out.join("figures").join("defense_grid.png");
        emit_figure(&cells, &path)?;
        write_json(&self.out.join("figures").join("cells.json"), &records)?;
        Ok(path)
    }
}

struct EvalInputs {
    adapter: Arc<ClassifierAdapter>,
    library: Arc<ConceptLibrary>,
    clean: Arc<Vec<Image>>,
    reference: Vec<usize>,
    clean_plans: Arc<PlanCache>,
    patched: Vec<(Vec<Image>, Arc<PlanCache>)>,
}

impl EvalInputs {
    fn concept_defense<'a>(&'a self, config: DefenseConfig, cache: &'a PlanCache) -> ConceptDefense<'a> {
        ConceptDefense {
            adapter: &self.adapter,
            library: &self.library,
            config,
            cache: Some(cache),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct FigureCell {
    pub image_id: String,
    pub area: f64,
    pub true_label: usize,
    pub attacked_label: usize,
    pub defended_label: usize,
    pub masked_pixels: usize,
}

/// Reads a stored report from an output directory.
pub fn load_report(out: &Path) -> Result<EvaluationReport> {
    read_json(&out.join("report.json"))
}
