//! Pipeline stages shared by the subcommands and `run-all`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use kml_core::logic::{evaluate_logic, LogicConfig, LogicReport, Operator};
use kml_core::program::{
    evaluate_igp, evaluate_kml, EvalReport, Program, ProgramSet, ProgramSource,
};
use kml_core::qa::{instantiate, validate, ImbalanceReport, QaConfig, QaInstance, TemplateId};
use kml_core::real::Precision;
use kml_core::synth::generate;
use kml_core::theory::{check_bound, BoundConfig, BoundSummary};
use kml_core::train::{
    separation_report, train, vqa_finetune, EmbeddingTable, FinetuneLog, KnowledgeModules,
    LogEntry, SeparationReport,
};
use kml_core::KnowledgeGraph;
use serde::Serialize;

use crate::config::RunConfig;
use crate::formats::{self, Checkpoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenKg,
    Train,
    Separation,
    GenQa,
    Finetune,
    Eval,
    Trace,
    Logic,
    Bounds,
    Config,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::GenKg => "gen-kg",
            Stage::Train => "train",
            Stage::Separation => "verify-separation",
            Stage::GenQa => "gen-qa",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
            Stage::Trace => "trace",
            Stage::Logic => "logic-eval",
            Stage::Bounds => "verify-bounds",
            Stage::Config => "config",
        })
    }
}

/// Attaches `stage=<name> file=<path>` to an error.
pub trait StageContext<T> {
    fn at(self, stage: Stage, file: &Path) -> Result<T>;
}

impl<T, E> StageContext<T> for std::result::Result<T, E>
where
    E: Into<anyhow::Error>,
{
    fn at(self, stage: Stage, file: &Path) -> Result<T> {
        self.map_err(Into::into)
            .with_context(|| format!("stage={stage} file={}", file.display()))
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let c: RunConfig = formats::read_json(path).at(Stage::Config, path)?;
    c.validate().at(Stage::Config, path)?;
    Ok(c)
}

pub fn load_kg(path: &Path, stage: Stage) -> Result<KnowledgeGraph> {
    formats::load_kg(path).at(stage, path)
}

pub fn load_checkpoint(dir: &Path, kg: &KnowledgeGraph, stage: Stage) -> Result<Checkpoint> {
    formats::load_checkpoint(dir, kg).at(stage, &dir.join(formats::MANIFEST_FILE))
}

pub struct TrainOutput {
    pub modules: KnowledgeModules<f32>,
    pub embeddings: EmbeddingTable<f32>,
    pub log: Vec<LogEntry>,
}

pub fn train_modules(kg: &KnowledgeGraph, config: &RunConfig) -> Result<TrainOutput> {
    let tc = config.train_config();
    let init = match &config.embeddings {
        Some(p) => {
            Some(formats::load_embedding_file(p, kg, config.embedding_mode).at(Stage::Train, p)?)
        }
        None => None,
    };
    let here = Path::new("<graph>");
    Ok(match config.precision {
        Precision::F32 => {
            let t = train::<f32>(kg, &tc, init).at(Stage::Train, here)?;
            TrainOutput {
                modules: t.modules,
                embeddings: t.embeddings,
                log: t.log,
            }
        }
        Precision::F64 => {
            let t = train::<f64>(kg, &tc, init.map(|e| e.cast())).at(Stage::Train, here)?;
            TrainOutput {
                modules: t.modules.cast(),
                embeddings: t.embeddings.cast(),
                log: t.log,
            }
        }
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct QaBatch {
    pub instances: Vec<QaInstance>,
    pub imbalance: BTreeMap<TemplateId, ImbalanceReport>,
    /// Templates the graph cannot support, with the reason.
    pub skipped: BTreeMap<TemplateId, String>,
}

/// Instantiates each template; templates the graph cannot support are
/// listed in `skipped` rather than failing the batch.
pub fn generate_qa(
    kg: &KnowledgeGraph,
    templates: &[TemplateId],
    per_template: usize,
    seed: u64,
    config: &QaConfig,
) -> QaBatch {
    let mut batch = QaBatch {
        instances: Vec::new(),
        imbalance: BTreeMap::new(),
        skipped: BTreeMap::new(),
    };
    for &tid in templates {
        match instantiate(tid, kg, seed, per_template, config) {
            Ok((q, r)) => {
                batch.instances.extend(q);
                batch.imbalance.insert(tid, r);
            }
            Err(e) => {
                batch.skipped.insert(tid, e.to_string());
            }
        }
    }
    batch
}

/// `templates`, `enumerate[:hops]`, or a JSON file mapping template ids to
/// lists of comma-separated relation paths.
pub fn parse_program_set(spec: &str) -> Result<ProgramSet> {
    if spec == "templates" {
        return Ok(ProgramSet::Templates);
    }
    if let Some(rest) = spec.strip_prefix("enumerate") {
        let max_hops = match rest.strip_prefix(':') {
            Some(n) => n
                .parse()
                .with_context(|| format!("bad hop count in `{spec}`"))?,
            None => 3,
        };
        return Ok(ProgramSet::Enumerated { max_hops });
    }
    let path = Path::new(spec);
    let raw: BTreeMap<String, Vec<String>> = formats::read_json(path).at(Stage::Eval, path)?;
    let mut out = BTreeMap::new();
    for (tid, progs) in raw {
        let tid = TemplateId::parse(&tid)
            .with_context(|| format!("unknown template `{tid}` in {}", path.display()))?;
        let progs = progs
            .iter()
            .map(|p| Program::parse(p, ProgramSource::Imported))
            .collect::<std::result::Result<Vec<_>, _>>()
            .at(Stage::Eval, path)?;
        out.insert(tid, progs);
    }
    Ok(ProgramSet::Imported(out))
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub version: String,
    pub seed: u64,
    pub entities: usize,
    pub questions_train: usize,
    pub questions_test: usize,
    pub kml_accuracy: f64,
    pub kml_mean_template_accuracy: f64,
    pub igp_accuracy: f64,
    pub igp_mean_template_accuracy: f64,
    pub checks: Vec<Check>,
}

impl RunSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Every artifact of a pipeline run, as written to disk.
pub struct RunArtifacts {
    pub summary: RunSummary,
    pub separation: SeparationReport,
    pub kml: EvalReport,
    pub igp: EvalReport,
    pub logic: LogicReport,
    pub bounds: BoundSummary,
    pub finetune: FinetuneLog,
}

fn out_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

/// Graph, training, separation check, question generation, fine-tuning,
/// evaluation of both methods, logic evaluation and bound verification.
/// Every report lands in `out`; nothing time-dependent is written.
pub fn run_all(config: &RunConfig, out: &Path) -> Result<RunArtifacts> {
    config.validate().at(Stage::Config, out)?;
    fs::create_dir_all(out).at(Stage::GenKg, out)?;

    let kg_path = out_file(out, "kg.json");
    let kg = match &config.kg {
        Some(p) => load_kg(p, Stage::GenKg)?,
        None => generate(&config.synth).at(Stage::GenKg, &kg_path)?,
    };
    formats::save_kg(&kg_path, &kg).at(Stage::GenKg, &kg_path)?;

    let trained = train_modules(&kg, config)?;
    let log_path = out_file(out, "train_log.jsonl");
    formats::save_train_log(&log_path, &trained.log).at(Stage::Train, &log_path)?;
    let (mut modules, mut embeddings) = (trained.modules, trained.embeddings);

    let sep_path = out_file(out, "separation.json");
    let separation = separation_report(&modules, &embeddings, &kg, config.separation_tau);
    formats::write_json(&sep_path, &separation).at(Stage::Separation, &sep_path)?;

    let qa_config = QaConfig {
        noise: config.noise,
        ..QaConfig::default()
    };
    let templates = config.templates();
    let test = generate_qa(
        &kg,
        &templates,
        config.per_template,
        config.seed,
        &qa_config,
    );
    let train_seed = config.seed.wrapping_add(1);
    let train_qa = generate_qa(
        &kg,
        &templates,
        config.train_per_template,
        train_seed,
        &qa_config,
    );
    for (name, batch) in [("qa_test", &test), ("qa_train", &train_qa)] {
        let p = out_file(out, &format!("{name}.jsonl"));
        formats::save_qa(&p, &batch.instances).at(Stage::GenQa, &p)?;
    }
    let qa_report = out_file(out, "qa_report.json");
    #[derive(Serialize)]
    struct QaReport<'a> {
        imbalance: &'a BTreeMap<TemplateId, ImbalanceReport>,
        skipped: &'a BTreeMap<TemplateId, String>,
    }
    formats::write_json(
        &qa_report,
        &QaReport {
            imbalance: &test.imbalance,
            skipped: &test.skipped,
        },
    )
    .at(Stage::GenQa, &qa_report)?;

    let programs = ProgramSet::Templates;
    let ft_path = out_file(out, "finetune_log.jsonl");
    let finetune = if config.finetune_epochs > 0 && !train_qa.instances.is_empty() {
        vqa_finetune(
            &mut modules,
            &mut embeddings,
            &train_qa.instances,
            &programs,
            &kg,
            &config.finetune_config(),
        )
        .at(Stage::Finetune, &ft_path)?
    } else {
        FinetuneLog::default()
    };
    formats::write_jsonl(&ft_path, &finetune.epochs).at(Stage::Finetune, &ft_path)?;

    let ckpt = out_file(out, "ckpt");
    formats::save_checkpoint(&ckpt, &modules, &embeddings, &kg, config.seed)
        .at(Stage::Train, &ckpt)?;
    let ck = load_checkpoint(&ckpt, &kg, Stage::Eval)?;
    let (modules, embeddings) = (ck.modules, ck.embeddings);

    let kml_path = out_file(out, "eval_kml.json");
    let kml = evaluate_kml(
        &test.instances,
        &kg,
        &modules,
        &embeddings,
        &programs,
        config.aggregation,
        None,
    )
    .at(Stage::Eval, &kml_path)?;
    formats::write_json(&kml_path, &kml).at(Stage::Eval, &kml_path)?;
    let igp_path = out_file(out, "eval_igp.json");
    let igp = evaluate_igp(&test.instances, &kg, &programs).at(Stage::Eval, &igp_path)?;
    formats::write_json(&igp_path, &igp).at(Stage::Eval, &igp_path)?;

    let logic_path = out_file(out, "logic.json");
    let logic_cfg = LogicConfig {
        k: config.logic_k,
        seed: config.seed,
        ..LogicConfig::default()
    };
    let logic = evaluate_logic(&modules, &embeddings, &kg, &Operator::ALL, &logic_cfg)
        .at(Stage::Logic, &logic_path)?;
    formats::write_json(&logic_path, &logic).at(Stage::Logic, &logic_path)?;

    let bounds_path = out_file(out, "bounds.json");
    let bound_cfg = BoundConfig {
        max_hops: config.max_hops,
        random_samples: config.bound_samples,
        seed: config.seed,
    };
    let bounds = check_bound(&modules.cast(), &kg, &embeddings.cast(), &bound_cfg)
        .at(Stage::Bounds, &bounds_path)?;
    formats::write_json(&bounds_path, &bounds).at(Stage::Bounds, &bounds_path)?;

    let invalid = test
        .instances
        .iter()
        .chain(&train_qa.instances)
        .filter(|q| !validate(q, &kg))
        .count();
    let s = &separation.summary;
    let checks = vec![
        Check {
            name: "qa_instances_validate".into(),
            passed: invalid == 0,
            detail: format!(
                "{invalid} invalid of {}",
                test.instances.len() + train_qa.instances.len()
            ),
        },
        Check {
            name: "separation_implication".into(),
            passed: s.implication_exceptions == 0,
            detail: format!(
                "{} exceptions among {} records below the bound",
                s.implication_exceptions, s.below_bound
            ),
        },
        Check {
            name: "softmax_mass_bound".into(),
            passed: s.mass_bound_violations == 0,
            detail: format!("{} violations", s.mass_bound_violations),
        },
        Check {
            name: "composition_bound".into(),
            passed: bounds.violations == 0,
            detail: format!(
                "{} violations over {} runs, c* = {:.4}",
                bounds.violations,
                bounds.records.len(),
                bounds.c_star
            ),
        },
    ];
    let summary = RunSummary {
        version: formats::FORMAT_VERSION.into(),
        seed: config.seed,
        entities: kg.len(),
        questions_train: train_qa.instances.len(),
        questions_test: test.instances.len(),
        kml_accuracy: kml.accuracy,
        kml_mean_template_accuracy: kml.mean_template_accuracy,
        igp_accuracy: igp.accuracy,
        igp_mean_template_accuracy: igp.mean_template_accuracy,
        checks,
    };
    let sum_path = out_file(out, "summary.json");
    formats::write_json(&sum_path, &summary).at(Stage::Eval, &sum_path)?;
    Ok(RunArtifacts {
        summary,
        separation,
        kml,
        igp,
        logic,
        bounds,
        finetune,
    })
}

/// Report files produced by [`run_all`], relative to the output directory.
pub const REPORT_FILES: &[&str] = &[
    "kg.json",
    "train_log.jsonl",
    "separation.json",
    "qa_test.jsonl",
    "qa_train.jsonl",
    "qa_report.json",
    "finetune_log.jsonl",
    "eval_kml.json",
    "eval_igp.json",
    "logic.json",
    "bounds.json",
    "summary.json",
];
