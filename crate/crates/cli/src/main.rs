use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use symptom_fv::fisher::{encode, EncodeConfig};
use symptom_fv::gmm::{fit_em, GaussianMixture};
use symptom_fv::io::{
    load_labels, load_model, load_sequences, read_json, save_labels, save_model, save_sequences,
    write_json,
};
use symptom_fv::model::{
    normalize_sequence, validate_dataset_with, ExpressionSequence, LabeledDataset, ValidationOptions,
};
use symptom_fv::pipeline::{
    correlation_report, loocv, run_training_stages, PipelineConfig, PipelineTrainer,
};
use symptom_fv::regression::predict;
use symptom_fv::synth::{generate_synthetic, SyntheticSpec};

#[derive(Parser)]
#[command(name = "symptom-fv", version, about = "Symptom-severity estimation from facial-expression sequences")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config: a pipeline config, or a synthetic spec for `synth`
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for machine-readable results
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args)]
struct DataArgs {
    /// A sequence CSV file or a directory of them
    #[arg(long)]
    sequences: PathBuf,
    /// Label document (JSON)
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled cohort
    Synth,
    /// Fit the expression mixture with EM on pooled normalized frames
    FitGmm {
        #[arg(long)]
        sequences: PathBuf,
        /// Overrides the number of components in the config
        #[arg(long)]
        components: Option<usize>,
    },
    /// Run all training stages and save a model checkpoint
    Train {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Encode sequences as Fisher vectors
    Encode {
        #[arg(long)]
        sequences: PathBuf,
        /// Model checkpoint whose mixture is used
        #[arg(long, conflicts_with = "gmm")]
        model: Option<PathBuf>,
        /// Mixture written by `fit-gmm`
        #[arg(long)]
        gmm: Option<PathBuf>,
    },
    /// Score sequences with a trained model
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sequences: PathBuf,
    },
    /// Leave-one-out evaluation of the full pipeline
    Loocv {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Activation frequencies correlated with symptom ratings
    Correlate {
        #[command(flatten)]
        data: DataArgs,
        /// Presence threshold; defaults to the config value
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Check a dataset for consistency
    Validate {
        #[command(flatten)]
        data: DataArgs,
        /// Reject videos whose face-detection fraction is below this
        #[arg(long)]
        min_detected_fraction: Option<f64>,
    },
}

fn pipeline_config(common: &Common) -> Result<PipelineConfig> {
    let mut config: PipelineConfig = match &common.config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.check()?;
    Ok(config)
}

fn load_dataset(data: &DataArgs) -> Result<LabeledDataset> {
    let sequences = load_sequences(&data.sequences)?;
    let (records, scale) = load_labels(&data.labels)?;
    Ok(LabeledDataset::new(sequences, records, scale))
}

fn emit(common: &Common, file: &str, report: &serde_json::Value) -> Result<()> {
    if let Some(dir) = &common.out {
        let path = dir.join(file);
        write_json(&path, report)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn require_out(common: &Common) -> Result<&Path> {
    match &common.out {
        Some(p) => Ok(p),
        None => bail!("--out is required for this command"),
    }
}

fn normalized(seq: &ExpressionSequence) -> Result<ExpressionSequence> {
    Ok(if seq.is_normalized() {
        seq.clone()
    } else {
        normalize_sequence(seq)?
    })
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let common = &cli.common;
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Synth => {
            let mut spec: SyntheticSpec = match &common.config {
                Some(p) => read_json(p)?,
                None => SyntheticSpec::default(),
            };
            if let Some(seed) = common.seed {
                spec.seed = seed;
            }
            let out = require_out(common)?;
            let (dataset, manifest) = generate_synthetic(&spec)?;
            save_sequences(dataset.sequences(), &out.join("sequences"))?;
            save_labels(&out.join("labels.json"), dataset.records(), dataset.scale())?;
            write_json(&out.join("manifest.json"), &manifest)?;
            println!(
                "generated {} videos ({} expressions, scale {}) in {}",
                dataset.len(),
                spec.expression_names.len(),
                dataset.scale().scale_name,
                out.display()
            );
        }
        Command::FitGmm {
            sequences,
            components,
        } => {
            let config = pipeline_config(common)?;
            let k = components.unwrap_or(config.components);
            let seqs = load_sequences(sequences)?;
            let frames = seqs
                .iter()
                .map(|s| Ok(normalized(s)?.frames().to_owned()))
                .collect::<Result<Vec<_>>>()?;
            let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
            let pooled = ndarray::concatenate(ndarray::Axis(0), &views)
                .context("sequences disagree on the number of expressions")?;
            let em = symptom_fv::gmm::EmConfig {
                variance_floor: config.variance_floor,
                seed: config.seed,
                ..config.em
            };
            let (gmm, trace) = fit_em(pooled.view(), k, &em)?;
            println!(
                "EM: K={k}, {} frames, {} iterations, converged {}, log-likelihood {:.4} -> {:.4}",
                pooled.nrows(),
                trace.iterations,
                trace.converged,
                trace.log_likelihoods[0],
                trace.log_likelihoods.last().unwrap()
            );
            let out = require_out(common)?;
            write_json(&out.join("gmm.json"), &gmm)?;
            write_json(&out.join("em_trace.json"), &trace)?;
            println!("wrote {}", out.join("gmm.json").display());
        }
        Command::Train { data } => {
            let config = pipeline_config(common)?;
            let dataset = load_dataset(data)?;
            let bundle = run_training_stages(&dataset, &config)?;
            for s in &bundle.stage_log {
                println!(
                    "stage {:<7} iterations {:>5}  objective {:.6} -> {:.6}",
                    s.stage, s.iterations, s.initial_objective, s.final_objective
                );
            }
            let out = require_out(common)?;
            let path = out.join("model.json");
            save_model(&bundle, &path)?;
            println!("wrote {}", path.display());
        }
        Command::Encode {
            sequences,
            model,
            gmm,
        } => {
            let (mixture, threshold) = match (model, gmm) {
                (Some(m), _) => {
                    let b = load_model(m)?;
                    (b.model.gmm, b.model.posterior_threshold)
                }
                (None, Some(g)) => (
                    read_json::<GaussianMixture>(g)?,
                    pipeline_config(common)?.posterior_threshold,
                ),
                (None, None) => bail!("one of --model or --gmm is required"),
            };
            let cfg = EncodeConfig {
                sparsify_threshold: threshold,
            };
            let mut vectors = serde_json::Map::new();
            for seq in load_sequences(sequences)? {
                let fv = encode(&normalized(&seq)?, &mixture, &cfg)?;
                println!("{}: Fisher vector of length {}", seq.video_id(), fv.len());
                vectors.insert(seq.video_id().to_string(), json!(fv.values().to_vec()));
            }
            let out = require_out(common)?;
            write_json(&out.join("fisher_vectors.json"), &vectors)?;
            println!("wrote {}", out.join("fisher_vectors.json").display());
        }
        Command::Predict { model, sequences } => {
            let bundle = load_model(model)?;
            let mut preds = Vec::new();
            for seq in load_sequences(sequences)? {
                let p = predict(&bundle.model, &seq)?;
                println!(
                    "{:<20} symptoms {:?} total {}",
                    p.video_id, p.symptom_scores, p.total_score
                );
                preds.push(p);
            }
            emit(common, "predictions.json", &json!(preds))?;
        }
        Command::Loocv { data } => {
            let config = pipeline_config(common)?;
            let dataset = load_dataset(data)?;
            let report = loocv(&dataset, &PipelineTrainer { config: &config })?;
            print!("{}", report.render());
            emit(common, "loocv.json", &json!(report))?;
        }
        Command::Correlate { data, threshold } => {
            let config = pipeline_config(common)?;
            let dataset = load_dataset(data)?;
            let table =
                correlation_report(&dataset, threshold.unwrap_or(config.binarize_threshold))?;
            print!("{}", table.render());
            println!("* p <= 0.01, ** p <= 0.001");
            emit(common, "correlations.json", &json!(table))?;
        }
        Command::Validate {
            data,
            min_detected_fraction,
        } => {
            let dataset = load_dataset(data)?;
            let violations = validate_dataset_with(
                &dataset,
                &ValidationOptions {
                    min_detected_fraction: *min_detected_fraction,
                },
            );
            for v in &violations {
                println!("{v}");
            }
            println!(
                "{} videos, {} violation(s)",
                dataset.len(),
                violations.len()
            );
            emit(common, "validation.json", &json!(violations))?;
            if !violations.is_empty() {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            let causes: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", json!({ "error": causes[0], "causes": &causes[1..] }));
            ExitCode::FAILURE
        }
    }
}
