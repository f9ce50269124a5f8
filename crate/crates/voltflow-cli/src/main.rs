//! Command-line front end for the training pipeline: stage commands,
//! waveform sampling, evaluation, corpus export, and the comparison suite.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error,
//! 3 divergence guard.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use voltflow::checkpoint::Checkpoint;
use voltflow::config::RunConfig;
use voltflow::flow::Guidance;
use voltflow::pipeline::variants::{comparison_table, run_experiment_suite};
use voltflow::pipeline::{
    build_corpora, ensure_stage1, ensure_stage2, ensure_stage3, eval_generation_seed, evaluate,
    PipelineError, STAGE1_FILE, STAGE2_FILE, STAGE3_FILE,
};
use voltflow::synth::{write_csv, Corpus, Waveform};

#[derive(Parser)]
#[command(
    name = "voltflow",
    version,
    about = "Operator-guided flow matching for battery discharge waveforms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: pretrain and freeze the guidance operator
    Pretrain(RunArgs),
    /// Stage 2: train the guided flow-matching field (chains stage 1)
    Train(RunArgs),
    /// Stage 3: refine under the constraint hierarchy (chains stages 1-2)
    Refine(RunArgs),
    /// Sample waveforms per evaluation group and write them as CSV
    Generate(RunArgs),
    /// Score generated waveforms and print the metrics table
    Evaluate(RunArgs),
    /// Write the synthetic training and evaluation corpora as CSV
    Synth(RunArgs),
    /// Run the full variant-comparison suite
    Suite(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Raise model sizes and epochs toward publication scale (slow; not
    /// exercised by the test suite)
    #[arg(long)]
    paper_scale: bool,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            err.print().expect("console is writable");
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        if err.exit_code() == 1 {
            eprintln!("run 'voltflow --help' for usage");
        }
        std::process::exit(err.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let args = match &cli.command {
        Command::Pretrain(a)
        | Command::Train(a)
        | Command::Refine(a)
        | Command::Generate(a)
        | Command::Evaluate(a)
        | Command::Synth(a)
        | Command::Suite(a) => a,
    };
    let config = load_config(args)?;
    let out = PathBuf::from(&config.out_dir);
    match cli.command {
        Command::Pretrain(_) => cmd_pretrain(&config, &out),
        Command::Train(_) => cmd_train(&config, &out),
        Command::Refine(_) => cmd_refine(&config, &out),
        Command::Generate(_) => cmd_generate(&config, &out),
        Command::Evaluate(_) => cmd_evaluate(&config, &out),
        Command::Synth(_) => cmd_synth(&config, &out),
        Command::Suite(_) => cmd_suite(&config, &out),
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig, PipelineError> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.out_dir = out.display().to_string();
    }
    if args.paper_scale {
        apply_paper_scale(&mut config);
    }
    config.validate()?;
    Ok(config)
}

/// Publication-scale sizes. Wall-clock grows by orders of magnitude; the
/// test suite only exercises desk scale.
fn apply_paper_scale(config: &mut RunConfig) {
    config.fno.width = 64;
    config.fno.modes = 12;
    config.fno.layers = 4;
    config.velocity.trunk_width = 256;
    config.velocity.trunk_blocks = 4;
    config.velocity.cond_hidden = 64;
    config.velocity.cond_embed = 32;
    config.hierarchy.hidden = 128;
    config.training.epochs_pretrain = 300;
    config.training.epochs_train = 300;
    config.training.epochs_refine = 300;
    config.eval.ode_steps = 100;
}

fn remove_if_present(path: &Path) -> Result<(), PipelineError> {
    match std::fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(source) => {
            Err(PipelineError::Io { path: path.display().to_string(), source })
        }
    }
}

fn cmd_pretrain(config: &RunConfig, out: &Path) -> Result<(), PipelineError> {
    remove_if_present(&out.join(STAGE1_FILE))?;
    ensure_stage1(config, out)?;
    println!("stage 1 complete: {}", out.join(STAGE1_FILE).display());
    println!("loss curve: {}", out.join("pretrain_report.json").display());
    Ok(())
}

fn cmd_train(config: &RunConfig, out: &Path) -> Result<(), PipelineError> {
    remove_if_present(&out.join(STAGE2_FILE))?;
    ensure_stage2(config, out)?;
    println!("stage 2 complete: {}", out.join(STAGE2_FILE).display());
    Ok(())
}

fn cmd_refine(config: &RunConfig, out: &Path) -> Result<(), PipelineError> {
    remove_if_present(&out.join(STAGE3_FILE))?;
    ensure_stage3(config, out)?;
    println!("stage 3 complete: {}", out.join(STAGE3_FILE).display());
    println!("diagnostics: {}", out.join("refine_diagnostics.json").display());
    Ok(())
}

/// The most refined models available, training missing stages when their
/// toggles allow.
fn resolve_models(config: &RunConfig, out: &Path) -> Result<Checkpoint, PipelineError> {
    if config.stages.refine {
        return ensure_stage3(config, out);
    }
    if config.stages.train {
        return ensure_stage2(config, out);
    }
    for file in [STAGE3_FILE, STAGE2_FILE] {
        let path = out.join(file);
        if path.exists() {
            return Ok(Checkpoint::load(&path)?);
        }
    }
    Err(PipelineError::Config(format!(
        "training stages are disabled and neither {STAGE3_FILE} nor {STAGE2_FILE} exists in {}",
        out.display()
    )))
}

fn cmd_generate(config: &RunConfig, out: &Path) -> Result<(), PipelineError> {
    let ckpt = resolve_models(config, out)?;
    let field = ckpt.field.as_ref().ok_or_else(|| {
        PipelineError::Config("checkpoint holds no velocity field; run 'train' first".into())
    })?;
    let guidance = match &ckpt.fno {
        Some(fno) => Guidance::frozen(fno)?,
        None => Guidance::None,
    };
    let corpora = build_corpora(config);
    for (name, real) in &corpora.eval {
        let temps: Vec<f64> = real.waveforms.iter().map(|w| w.temperature_c).collect();
        let tensor = voltflow::flow::generate(
            field,
            &guidance,
            &temps,
            &config.encoding,
            config.eval.ode_steps,
            eval_generation_seed(config.seed, name),
        )?;
        let l = real.curve_len;
        let waveforms = real
            .waveforms
            .iter()
            .enumerate()
            .map(|(i, w)| Waveform {
                battery_id: format!("gen-{}", w.battery_id),
                temperature_c: w.temperature_c,
                cycle: w.cycle,
                values: tensor.data[i * l..(i + 1) * l].to_vec(),
            })
            .collect();
        let generated = Corpus { curve_len: l, waveforms };
        let path = out.join(format!("generated_{name}.csv"));
        write_csv(&path, &generated)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_evaluate(config: &RunConfig, out: &Path) -> Result<(), PipelineError> {
    let ckpt = resolve_models(config, out)?;
    let field = ckpt.field.as_ref().ok_or_else(|| {
        PipelineError::Config("checkpoint holds no velocity field; run 'train' first".into())
    })?;
    let corpora = build_corpora(config);
    let report = evaluate(config, field, ckpt.fno.as_ref(), &corpora.eval, Some(out))?;
    print!("{}", report.render_table());
    println!("report: {}", out.join("metrics.json").display());
    Ok(())
}

fn cmd_synth(config: &RunConfig, out: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(out)
        .map_err(|source| PipelineError::Io { path: out.display().to_string(), source })?;
    let corpora = build_corpora(config);
    let mut written = vec![
        (out.join("pretrain.csv"), &corpora.pretrain),
        (out.join("train.csv"), &corpora.target_train),
    ];
    for (name, corpus) in &corpora.eval {
        written.push((out.join(format!("eval_{name}.csv")), corpus));
    }
    for (path, corpus) in written {
        write_csv(&path, corpus)?;
        println!("wrote {} ({} waveforms)", path.display(), corpus.len());
    }
    Ok(())
}

fn cmd_suite(config: &RunConfig, out: &Path) -> Result<(), PipelineError> {
    let results = run_experiment_suite(config, Some(out))?;
    print!("{}", comparison_table(&results));
    println!("results: {}", out.join("suite_results.json").display());
    Ok(())
}
