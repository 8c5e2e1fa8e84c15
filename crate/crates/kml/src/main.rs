use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kml::config::RunConfig;
use kml::formats;
use kml::pipeline::{self, Stage, StageContext};
use kml_core::logic::{evaluate_logic, LogicConfig, Operator};
use kml_core::nn::total_parameter_count;
use kml_core::program::{
    evaluate_igp, evaluate_kml, execute, ground, Aggregation, Program, ProgramSource,
};
use kml_core::qa::{GroundingNoise, QaConfig, TemplateId};
use kml_core::synth::{generate, SyntheticKgSpec};
use kml_core::theory::{check_bound, BoundConfig};
use kml_core::train::{separation_report, vqa_finetune, FinetuneConfig};
use kml_core::KnowledgeGraph;

/// Parameter total quoted for the sixteen-module configuration, one above
/// what the architecture yields.
const QUOTED_PARAMETERS: usize = 2_107_393;

#[derive(Parser)]
#[command(
    name = "kml",
    version,
    about = "Relation knowledge modules over a procedural knowledge graph"
)]
struct Cli {
    /// Default seed for every subcommand.
    #[arg(long, env = "KML_SEED", default_value_t = 0, global = true)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic knowledge graph.
    GenKg(GenKgArgs),
    /// Train one module per relation.
    Train(TrainArgs),
    /// Generate multiple-choice questions.
    GenQa(GenQaArgs),
    /// Fine-tune a checkpoint on questions.
    Finetune(FinetuneArgs),
    /// Answer questions with the modules or the propagation baseline.
    EvalQa(EvalArgs),
    /// Execute one program and print the per-hop trace.
    Trace(TraceArgs),
    /// Precision@k of the soft logical operators.
    LogicEval(LogicArgs),
    /// Check the loss/separation relationship for every (head, relation).
    VerifySeparation(SeparationArgs),
    /// Measure multi-hop deviations against the composition bound.
    VerifyBounds(BoundsArgs),
    /// Run every stage and write all reports.
    RunAll(RunAllArgs),
    /// Print the module parameter count.
    ParamCount(ParamArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Small,
    Medium,
    TwentyTools,
}

#[derive(Args)]
struct GenKgArgs {
    #[arg(long, value_enum, default_value = "small")]
    preset: Preset,
    /// JSON spec overriding the preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CkptArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Defaults to the graph stored next to the checkpoint.
    #[arg(long)]
    kg: Option<PathBuf>,
}

impl CkptArgs {
    fn kg_path(&self) -> PathBuf {
        self.kg.clone().unwrap_or_else(|| self.ckpt.join("kg.json"))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    kg: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// `{id: [..]}` initial embeddings.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct GenQaArgs {
    #[arg(long)]
    kg: PathBuf,
    /// Comma-separated template ids; all when omitted.
    #[arg(long, value_delimiter = ',')]
    templates: Vec<String>,
    #[arg(long, default_value_t = 100)]
    per_template: usize,
    #[arg(long, default_value_t = 0.0)]
    flip_prob: f64,
    #[arg(long, default_value_t = 1)]
    top_k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    ckpt: CkptArgs,
    #[arg(long)]
    qa: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value = "templates")]
    programs: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Kml,
    Igp,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggArg {
    Max,
    Mean,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    ckpt: CkptArgs,
    #[arg(long)]
    qa: PathBuf,
    #[arg(long, value_enum, default_value = "kml")]
    method: MethodArg,
    /// `templates`, `enumerate[:hops]` or a JSON program file.
    #[arg(long, default_value = "templates")]
    programs: String,
    #[arg(long, value_enum, default_value = "max")]
    aggregation: AggArg,
    /// `{label: [..]}` vectors for options that are not graph entities.
    #[arg(long)]
    option_embeddings: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    ckpt: CkptArgs,
    /// Comma-separated relation names.
    #[arg(long)]
    program: String,
    /// `type=id:score,id:score`; the type prefix is optional.
    #[arg(long)]
    ground: String,
    #[arg(long, default_value_t = 5)]
    topk: usize,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct LogicArgs {
    #[command(flatten)]
    ckpt: CkptArgs,
    #[arg(long, value_delimiter = ',', default_value = "not,and,or")]
    ops: Vec<String>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct SeparationArgs {
    #[command(flatten)]
    ckpt: CkptArgs,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BoundsArgs {
    #[command(flatten)]
    ckpt: CkptArgs,
    #[arg(long, default_value_t = 3)]
    max_hops: usize,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct RunAllArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Graph file; a synthetic graph is generated when absent.
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
}

#[derive(Args)]
struct ParamArgs {
    #[arg(long, default_value_t = 16)]
    relations: usize,
    #[arg(long, default_value_t = 512)]
    dim: usize,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed;
    match cli.command {
        Command::GenKg(a) => gen_kg(a, seed)?,
        Command::Train(a) => train(a, seed)?,
        Command::GenQa(a) => gen_qa(a, seed)?,
        Command::Finetune(a) => finetune(a, seed)?,
        Command::EvalQa(a) => eval_qa(a)?,
        Command::Trace(a) => trace(a)?,
        Command::LogicEval(a) => logic_eval(a, seed)?,
        Command::VerifySeparation(a) => verify_separation(a)?,
        Command::VerifyBounds(a) => return verify_bounds(a, seed),
        Command::RunAll(a) => return run_all(a, seed),
        Command::ParamCount(a) => param_count(a),
    }
    Ok(ExitCode::SUCCESS)
}

fn gen_kg(a: GenKgArgs, seed: u64) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => {
            let mut s: SyntheticKgSpec = formats::read_json(p).at(Stage::GenKg, p)?;
            s.seed = seed;
            s
        }
        None => match a.preset {
            Preset::Small => SyntheticKgSpec {
                seed,
                ..SyntheticKgSpec::default()
            },
            Preset::Medium => SyntheticKgSpec::medium(seed),
            Preset::TwentyTools => SyntheticKgSpec::twenty_tools(seed),
        },
    };
    let kg = generate(&spec).at(Stage::GenKg, &a.out)?;
    formats::save_kg(&a.out, &kg).at(Stage::GenKg, &a.out)?;
    println!("wrote {} entities to {}", kg.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs, seed: u64) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => pipeline::load_config(p)?,
        None => RunConfig {
            seed,
            ..RunConfig::default()
        },
    };
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.dim {
        config.dim = v;
    }
    if let Some(v) = a.hidden {
        config.hidden = v;
    }
    if let Some(v) = a.lr {
        config.lr = v;
    }
    if let Some(v) = a.temperature {
        config.temperature = v;
    }
    if a.embeddings.is_some() {
        config.embeddings = a.embeddings.clone();
    }
    config.validate().at(
        Stage::Config,
        a.config.as_deref().unwrap_or(Path::new("<flags>")),
    )?;
    let kg = pipeline::load_kg(&a.kg, Stage::Train)?;
    let out = pipeline::train_modules(&kg, &config)?;
    formats::save_checkpoint(&a.out, &out.modules, &out.embeddings, &kg, config.seed)
        .at(Stage::Train, &a.out)?;
    let kg_copy = a.out.join("kg.json");
    formats::save_kg(&kg_copy, &kg).at(Stage::Train, &kg_copy)?;
    let log = a.out.join("train_log.jsonl");
    formats::save_train_log(&log, &out.log).at(Stage::Train, &log)?;
    let untrained: Vec<_> = out.modules.untrained().map(|r| r.name()).collect();
    println!(
        "trained {} modules into {}",
        out.modules.len(),
        a.out.display()
    );
    if !untrained.is_empty() {
        println!("untrained (no triplets): {}", untrained.join(", "));
    }
    Ok(())
}

fn parse_templates(raw: &[String]) -> Result<Vec<TemplateId>> {
    if raw.is_empty() {
        return Ok(TemplateId::all().collect());
    }
    raw.iter()
        .map(|s| TemplateId::parse(s).with_context(|| format!("unknown template `{s}`")))
        .collect()
}

fn gen_qa(a: GenQaArgs, seed: u64) -> Result<()> {
    let kg = pipeline::load_kg(&a.kg, Stage::GenQa)?;
    let templates = parse_templates(&a.templates).at(Stage::GenQa, &a.kg)?;
    let config = QaConfig {
        noise: GroundingNoise {
            flip_prob: a.flip_prob,
            top_k: a.top_k,
        },
        ..QaConfig::default()
    };
    let batch = pipeline::generate_qa(&kg, &templates, a.per_template, seed, &config);
    formats::save_qa(&a.out, &batch.instances).at(Stage::GenQa, &a.out)?;
    println!(
        "wrote {} questions to {}",
        batch.instances.len(),
        a.out.display()
    );
    for (tid, r) in &batch.imbalance {
        println!("{tid}: imbalance ratio {:.3}", r.max_ratio);
    }
    for (tid, why) in &batch.skipped {
        println!("{tid}: skipped ({why})");
    }
    Ok(())
}

fn finetune(a: FinetuneArgs, seed: u64) -> Result<()> {
    let kg_path = a.ckpt.kg_path();
    let kg = pipeline::load_kg(&kg_path, Stage::Finetune)?;
    let mut ck = pipeline::load_checkpoint(&a.ckpt.ckpt, &kg, Stage::Finetune)?;
    let qa = formats::load_qa(&a.qa).at(Stage::Finetune, &a.qa)?;
    let programs = pipeline::parse_program_set(&a.programs)?;
    let config = FinetuneConfig {
        epochs: a.epochs,
        lr: a.lr,
        seed,
        ..FinetuneConfig::default()
    };
    let log = vqa_finetune(
        &mut ck.modules,
        &mut ck.embeddings,
        &qa,
        &programs,
        &kg,
        &config,
    )
    .at(Stage::Finetune, &a.qa)?;
    formats::save_checkpoint(&a.out, &ck.modules, &ck.embeddings, &kg, ck.manifest.seed)
        .at(Stage::Finetune, &a.out)?;
    let kg_copy = a.out.join("kg.json");
    formats::save_kg(&kg_copy, &kg).at(Stage::Finetune, &kg_copy)?;
    let log_path = a.out.join("finetune_log.jsonl");
    formats::write_jsonl(&log_path, &log.epochs).at(Stage::Finetune, &log_path)?;
    if let Some(last) = log.epochs.last() {
        println!(
            "epoch {}: loss {:.4}, correct-option probability {:.4}",
            last.epoch, last.mean_loss, last.mean_correct_prob
        );
    }
    Ok(())
}

fn eval_qa(a: EvalArgs) -> Result<()> {
    let kg_path = a.ckpt.kg_path();
    let kg = pipeline::load_kg(&kg_path, Stage::Eval)?;
    let qa = formats::load_qa(&a.qa).at(Stage::Eval, &a.qa)?;
    let programs = pipeline::parse_program_set(&a.programs)?;
    let report = match a.method {
        MethodArg::Kml => {
            let ck = pipeline::load_checkpoint(&a.ckpt.ckpt, &kg, Stage::Eval)?;
            let side = match &a.option_embeddings {
                Some(p) => Some(formats::read_json::<formats::VectorFile>(p).at(Stage::Eval, p)?),
                None => None,
            };
            let agg = match a.aggregation {
                AggArg::Max => Aggregation::Max,
                AggArg::Mean => Aggregation::Mean,
            };
            evaluate_kml(
                &qa,
                &kg,
                &ck.modules,
                &ck.embeddings,
                &programs,
                agg,
                side.as_ref(),
            )
            .at(Stage::Eval, &a.qa)?
        }
        MethodArg::Igp => evaluate_igp(&qa, &kg, &programs).at(Stage::Eval, &a.qa)?,
    };
    formats::write_json(&a.report, &report).at(Stage::Eval, &a.report)?;
    println!(
        "{:?}: accuracy {:.1}%, mean per-template accuracy {:.1}% over {} questions",
        report.method,
        100.0 * report.accuracy,
        100.0 * report.mean_template_accuracy,
        report.questions
    );
    for (tid, s) in &report.per_template {
        println!(
            "  {tid:>4} {:>6.1}% ({}/{})",
            100.0 * s.accuracy,
            s.correct,
            s.total
        );
    }
    Ok(())
}

fn parse_grounding(raw: &str, kg: &KnowledgeGraph) -> Result<(Vec<f64>, Vec<kml_core::EntityIdx>)> {
    let body = raw.split_once('=').map_or(raw, |(_, b)| b);
    let mut scores = Vec::new();
    let mut cats = Vec::new();
    for part in body.split(',').filter(|p| !p.trim().is_empty()) {
        let (id, score) = part.rsplit_once(':').unwrap_or((part, "1.0"));
        let score: f64 = score
            .trim()
            .parse()
            .with_context(|| format!("bad score in `{part}`"))?;
        cats.push(kg.idx(id.trim())?);
        scores.push(score);
    }
    if cats.is_empty() {
        bail!("empty grounding `{raw}`");
    }
    Ok((scores, cats))
}

fn trace(a: TraceArgs) -> Result<()> {
    let kg_path = a.ckpt.kg_path();
    let kg = pipeline::load_kg(&kg_path, Stage::Trace)?;
    let ck = pipeline::load_checkpoint(&a.ckpt.ckpt, &kg, Stage::Trace)?;
    let program = Program::parse(&a.program, ProgramSource::Imported).at(Stage::Trace, &kg_path)?;
    let (scores, cats) = parse_grounding(&a.ground, &kg).at(Stage::Trace, &kg_path)?;
    let z = ground(&scores, &cats, &ck.embeddings).at(Stage::Trace, &kg_path)?;
    let (trace, _) = execute(&program, &z, &ck.modules, &ck.embeddings, &kg, a.topk)
        .at(Stage::Trace, &kg_path)?;
    println!("program {}", trace.program);
    for (i, hop) in trace.hops.iter().enumerate() {
        println!("hop {} {}", i + 1, hop.relation);
        for r in &hop.top {
            println!("    {:<24} {:.4}", r.id, r.score);
        }
    }
    if let Some(p) = &a.json {
        formats::write_json(p, &trace).at(Stage::Trace, p)?;
    }
    Ok(())
}

fn logic_eval(a: LogicArgs, seed: u64) -> Result<()> {
    let kg_path = a.ckpt.kg_path();
    let kg = pipeline::load_kg(&kg_path, Stage::Logic)?;
    let ck = pipeline::load_checkpoint(&a.ckpt.ckpt, &kg, Stage::Logic)?;
    let ops = a
        .ops
        .iter()
        .map(|o| Operator::parse(o).with_context(|| format!("unknown operator `{o}`")))
        .collect::<Result<Vec<_>>>()?;
    let config = LogicConfig {
        k: a.k,
        seed,
        ..LogicConfig::default()
    };
    let report = evaluate_logic(&ck.modules, &ck.embeddings, &kg, &ops, &config)
        .at(Stage::Logic, &kg_path)?;
    formats::write_json(&a.report, &report).at(Stage::Logic, &a.report)?;
    print!("{:<22}", "relation");
    for op in &ops {
        print!("{:>8}", op.name().to_uppercase());
    }
    println!();
    for rel in kml_core::RelationId::forward_relations() {
        print!("{:<22}", rel.name());
        for &op in &ops {
            let v = report
                .cell(rel, op)
                .map_or_else(|| "--".into(), |c| c.display_value());
            print!("{v:>8}");
        }
        println!();
    }
    println!(
        "precision@{} with denominator {}",
        report.k, report.denominator
    );
    Ok(())
}

fn verify_separation(a: SeparationArgs) -> Result<()> {
    let kg_path = a.ckpt.kg_path();
    let kg = pipeline::load_kg(&kg_path, Stage::Separation)?;
    let ck = pipeline::load_checkpoint(&a.ckpt.ckpt, &kg, Stage::Separation)?;
    let report = separation_report(&ck.modules, &ck.embeddings, &kg, a.tau);
    formats::write_json(&a.out, &report).at(Stage::Separation, &a.out)?;
    let s = &report.summary;
    println!(
        "{} records, {} separated, {} below the loss bound, {} implication exceptions",
        s.records, s.separated, s.below_bound, s.implication_exceptions
    );
    println!(
        "mass bound violations {}, min-positive {}, max-negative {}, max-positive {}",
        s.mass_bound_violations,
        s.min_positive_bound_violations,
        s.max_negative_bound_violations,
        s.max_positive_bound_violations
    );
    Ok(())
}

fn verify_bounds(a: BoundsArgs, seed: u64) -> Result<ExitCode> {
    let kg_path = a.ckpt.kg_path();
    let kg = pipeline::load_kg(&kg_path, Stage::Bounds)?;
    let ck = pipeline::load_checkpoint(&a.ckpt.ckpt, &kg, Stage::Bounds)?;
    let config = BoundConfig {
        max_hops: a.max_hops,
        random_samples: a.samples,
        seed,
    };
    let s = check_bound(&ck.modules.cast(), &kg, &ck.embeddings.cast(), &config)
        .at(Stage::Bounds, &kg_path)?;
    formats::write_json(&a.report, &s).at(Stage::Bounds, &a.report)?;
    println!(
        "{} runs, {} skipped, {} bound violations, {} recursion violations, c* = {:.4}{}",
        s.records.len(),
        s.skipped.len(),
        s.violations,
        s.recursion_violations,
        s.c_star,
        if s.escalated {
            " (after resampling)"
        } else {
            ""
        }
    );
    Ok(if s.violations == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn run_all(a: RunAllArgs, seed: u64) -> Result<ExitCode> {
    let mut config = match &a.config {
        Some(p) => pipeline::load_config(p)?,
        None => RunConfig {
            seed,
            synth: SyntheticKgSpec::medium(seed),
            ..RunConfig::default()
        },
    };
    if a.kg.is_some() {
        config.kg = a.kg.clone();
    }
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.dim {
        config.dim = v;
    }
    if let Some(v) = a.finetune_epochs {
        config.finetune_epochs = v;
    }
    let art = pipeline::run_all(&config, &a.out)?;
    let s = &art.summary;
    println!(
        "{} questions on a {}-entity graph",
        s.questions_test, s.entities
    );
    println!(
        "KML accuracy {:.1}% (mean per template {:.1}%)",
        100.0 * s.kml_accuracy,
        100.0 * s.kml_mean_template_accuracy
    );
    println!(
        "IGP accuracy {:.1}% (mean per template {:.1}%)",
        100.0 * s.igp_accuracy,
        100.0 * s.igp_mean_template_accuracy
    );
    for c in &s.checks {
        println!(
            "[{}] {}: {}",
            if c.passed { "pass" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    Ok(if s.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn param_count(a: ParamArgs) {
    let n = total_parameter_count(a.relations, a.dim, a.hidden);
    println!(
        "{} modules at d={}, h={}: {n} parameters",
        a.relations, a.dim, a.hidden
    );
    if (a.relations, a.dim, a.hidden) == (16, 512, 128) {
        let delta = QUOTED_PARAMETERS as i64 - n as i64;
        println!("quoted figure {QUOTED_PARAMETERS} differs by {delta:+}");
    }
}
