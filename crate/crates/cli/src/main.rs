use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use pitune_core::data::instructions::{
    build_instructions, parse_annotations, read_jsonl, split_dataset, stats_csv, to_jsonl, TemplateSet,
};
use pitune_core::data::synthetic::{SyntheticConfig, SyntheticCorpus};
use pitune_core::data::{load_proteins, InstructionRecord, ProteinRecord, TaskType};
use pitune_core::lm::Inference;
use pitune_core::moe;
use pitune_core::pipeline::gradcheck::quadratic_self_test;
use pitune_core::pipeline::train::model_from_checkpoint;
use pitune_core::pipeline::{
    evaluate, gradcheck, load_config, train_stage, Checkpoint, Corpus, EvalConfig, GradcheckConfig,
    LossId, ModelConfig,
};
use pitune_core::{Error, Result};

#[derive(Parser)]
#[command(name = "pitune", version, about = "Structure-aware protein instruction tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build, split and summarize instruction datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Run one training stage.
    Train(TrainArgs),
    /// Turn every language-model FFN into a mixture of identical experts.
    Upcycle(UpcycleArgs),
    /// Score a checkpoint on a test set.
    Eval(EvalArgs),
    /// Answer one question about one protein.
    Generate(GenerateArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Instruction JSONL from an annotation table.
    Build {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Protein-disjoint train/test split of an instruction JSONL file.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Counts by task type, category and protein length.
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        fasta: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        bin_width: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the bundled synthetic corpus (FASTA, annotations, PDB files).
    Synthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        proteins: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args)]
struct ProteinArgs {
    /// Protein sequences.
    #[arg(long)]
    fasta: PathBuf,
    /// Directory of `<id>.pdb` files.
    #[arg(long)]
    pdb_dir: Option<PathBuf>,
}

impl ProteinArgs {
    fn load(&self) -> Result<Vec<ProteinRecord>> {
        load_proteins(&self.fasta, self.pdb_dir.as_deref())
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    stage: u8,
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    proteins: ProteinArgs,
    #[arg(long)]
    instructions: PathBuf,
    /// Checkpoint of the previous stage; required for stages 1 and 2.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss table.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct UpcycleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    experts: usize,
    #[arg(long, default_value_t = 1)]
    topk: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    proteins: ProteinArgs,
    #[arg(long)]
    instructions: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    max_new_tokens: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    proteins: ProteinArgs,
    #[arg(long)]
    protein: String,
    /// Must contain the `<protein>` placeholder once.
    #[arg(long)]
    question: String,
    #[arg(long, default_value_t = 32)]
    max_new_tokens: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// One of denoise, clip, mlm, stage0, instruction, aux, stage2, or all.
    #[arg(long, default_value = "all")]
    loss: String,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn read_records(path: &Path) -> Result<Vec<InstructionRecord>> {
    read_jsonl(&fs::read_to_string(path)?)
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => Ok(fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dataset(cmd: DatasetCommand) -> Result<()> {
    match cmd {
        DatasetCommand::Build {
            annotations,
            out,
            seed,
        } => {
            let rows = parse_annotations(&fs::read_to_string(annotations)?)?;
            let records = build_instructions(&rows, &TemplateSet::standard(), seed)?;
            fs::write(&out, to_jsonl(&records))?;
            info!("wrote {} records to {}", records.len(), out.display());
        }
        DatasetCommand::Split {
            input,
            train,
            test,
            test_fraction,
            seed,
        } => {
            let records = read_records(&input)?;
            let (tr, te) = split_dataset(&records, test_fraction, seed)?;
            fs::write(&train, to_jsonl(&tr))?;
            fs::write(&test, to_jsonl(&te))?;
            info!("split {} records into {} train and {} test", records.len(), tr.len(), te.len());
        }
        DatasetCommand::Stats {
            input,
            fasta,
            bin_width,
            out,
        } => {
            let records = read_records(&input)?;
            let proteins = match fasta {
                Some(f) => load_proteins(&f, None)?,
                None => Vec::new(),
            };
            write_or_print(out.as_deref(), &stats_csv(&records, &proteins, bin_width))?;
        }
        DatasetCommand::Synthetic {
            out,
            proteins,
            seed,
        } => {
            let corpus = SyntheticCorpus::generate(&SyntheticConfig {
                proteins,
                seed,
                ..SyntheticConfig::default()
            })?;
            corpus.write_to_dir(&out)?;
            info!("wrote {} proteins to {}", corpus.proteins.len(), out.display());
        }
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let (mut cfg, model) = load_config(&args.config)?;
    cfg.stage = args.stage;
    let prior = args.init.as_deref().map(Checkpoint::load).transpose()?;
    let proteins = args.proteins.load()?;
    let records = read_records(&args.instructions)?;
    let data = Corpus {
        proteins: &proteins,
        records: &records,
    };
    let out = train_stage(&cfg, &model, prior.as_ref(), &data)?;
    out.checkpoint.save(&args.out)?;
    if let Some(t) = &args.trace {
        fs::write(t, out.trace.to_csv())?;
    }
    if let Some(l) = out.trace.last_loss() {
        println!("stage {} finished after {} steps, final loss {l:.6}", cfg.stage, out.trace.rows.len());
    }
    Ok(())
}

fn upcycle(args: UpcycleArgs) -> Result<()> {
    let dense = Checkpoint::load(&args.checkpoint)?;
    let sparse = moe::upcycle(&dense, args.experts, args.topk, args.seed)?;
    sparse.save(&args.out)?;
    println!(
        "parameters: {} dense, {} upcycled",
        dense.params.param_count(),
        sparse.params.param_count()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let proteins = args.proteins.load()?;
    let records = read_records(&args.instructions)?;
    let cfg = EvalConfig {
        max_new_tokens: args.max_new_tokens,
        ..EvalConfig::default()
    };
    let report = evaluate(&ckpt, &records, &proteins, &cfg)?;
    write_or_print(args.out.as_deref(), &report.to_csv())
}

fn generate(args: GenerateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let proteins = args.proteins.load()?;
    let protein = proteins
        .iter()
        .find(|p| p.id == args.protein)
        .ok_or_else(|| Error::RejectedInput(format!("no protein '{}'", args.protein)))?;
    let (model, vocab) = model_from_checkpoint(&ckpt, &ModelConfig::default())?;
    let inf = Inference {
        store: &ckpt.params,
        enc: &model.enc,
        lm: &model.lm,
        vocab: &vocab,
    };
    let record = InstructionRecord {
        id: "cli".into(),
        protein_id: protein.id.clone(),
        task_type: TaskType::OpenEnded,
        category: String::new(),
        question: args.question,
        answer: String::new(),
    };
    println!("{}", inf.generate(&record, protein, args.max_new_tokens)?);
    Ok(())
}

/// Returns whether every check passed.
fn run_gradcheck(args: GradcheckArgs) -> Result<bool> {
    let cfg = GradcheckConfig {
        epsilon: args.epsilon,
        seed: args.seed,
        ..GradcheckConfig::default()
    };
    let losses: Vec<LossId> = if args.loss == "all" {
        LossId::ALL.to_vec()
    } else {
        vec![args.loss.parse()?]
    };
    let probe = quadratic_self_test(&cfg)?;
    let mut ok = probe.passed(1e-8);
    println!("loss,max_rel_error,worst_tensor,checked,pass");
    println!("quadratic,{:e},{},{},{}", probe.max_rel_error, probe.worst_tensor, probe.checked, ok);
    for l in losses {
        let r = gradcheck(l, &cfg)?;
        let pass = r.passed(args.tolerance);
        ok &= pass;
        println!("{},{:e},{},{},{pass}", r.loss, r.max_rel_error, r.worst_tensor, r.checked);
    }
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Dataset(c) => dataset(c),
        Command::Train(a) => train(a),
        Command::Upcycle(a) => upcycle(a),
        Command::Eval(a) => eval(a),
        Command::Generate(a) => generate(a),
        Command::Gradcheck(a) => match run_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("gradient check failed");
                return ExitCode::FAILURE;
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
