//! `cpl`: synthetic data generation, episodic training, evaluation and a
//! gradient self-check.
//!
//! Exit codes: 0 success, 1 verification or evaluation failure, 2 usage or
//! configuration error, 3 I/O or file-format error.

mod settings;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use cpl_core::gradcheck::{self, Fault, GradcheckOptions};
use cpl_core::{
    evaluate_generalized, evaluate_standard, generate_synthetic, load_checkpoint, load_dataset_from, resume,
    save_checkpoint, save_dataset_dir, train, trainer::write_log_csv, Aggregation, ClassSchedule, CplError,
    HyperParams, LossVariant, SamplingMode, SyntheticSpec, TrainConfig,
};

use settings::Settings;

#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl Exit {
    pub fn failure(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
    pub fn io(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<CplError> for Exit {
    fn from(e: CplError) -> Self {
        let code = match e {
            CplError::Io { .. } | CplError::Format { .. } | CplError::NotCheckpoint { .. } | CplError::Version { .. } => 3,
            CplError::Numeric(_) => 1,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

type Outcome = Result<(), Exit>;

fn shared(cmd: Command, out_default: &'static str) -> Command {
    cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("Flat key=value file of settings; command-line flags take precedence"),
    )
    .arg(
        Arg::new("out")
            .long("out")
            .value_name("DIR")
            .default_value(out_default)
            .help("Output directory"),
    )
    .arg(Arg::new("seed").long("seed").value_name("N").help("Random seed [default: 0]"))
}

fn opt(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).help(help)
}

fn switch(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).action(ArgAction::SetTrue).help(help)
}

fn cli() -> Command {
    let gen = shared(Command::new("gen-synth").about("Write a synthetic dataset and print the oracle accuracy"), "synth")
        .arg(opt("seen-classes", "Seen classes").default_value("27"))
        .arg(opt("unseen-classes", "Unseen classes").default_value("10"))
        .arg(opt("train-per-class", "Training samples per seen class").default_value("50"))
        .arg(opt("test-per-class", "Test samples per class").default_value("30"))
        .arg(opt("d-attr", "Attribute dimension").default_value("16"))
        .arg(opt("d-feat", "Feature dimension").default_value("64"))
        .arg(opt("noise-sigma", "Feature noise standard deviation").default_value("0.1"))
        .arg(opt("class-budget", "Fail if seen + unseen classes exceed this"));

    let train = shared(Command::new("train").about("Train the attribute embedder episodically"), "run")
        .arg(opt("manifest", "Dataset manifest"))
        .arg(
            opt("mode", "Episode construction: per-class tasks or plain batches")
                .value_parser(["task", "sample"])
                .default_value("task"),
        )
        .arg(opt("lambda", "Weight of the classification term [default: 0.1]"))
        .arg(opt("gamma", "Distance softmax temperature [default: 0.9]"))
        .arg(opt("c", "Classes per episode [default: number of unseen classes]"))
        .arg(opt("s", "Support samples per class [default: 10]"))
        .arg(opt("epochs", "Epochs to run (additional epochs when resuming) [default: 40]"))
        .arg(opt("lr", "Adam learning rate [default: 2e-4]"))
        .arg(opt("weight-decay", "L2 weight decay on weights [default: 1e-4]"))
        .arg(opt("hidden", "Hidden layer width [default: 1024]"))
        .arg(switch("cep-only", "Optimise the classification term alone"))
        .arg(
            opt("aggregation", "How per-sample losses are combined")
                .value_parser(["mean", "sum"])
                .default_value("mean"),
        )
        .arg(
            opt("schedule", "Episode class selection")
                .value_parser(["uniform", "coverage"])
                .default_value("uniform"),
        )
        .arg(switch("unit-attributes", "Scale attribute rows to unit length"))
        .arg(opt("validation-classes", "Hold out this many seen classes for model selection").default_value("0"))
        .arg(opt("resume", "Continue from this checkpoint"))
        .arg(opt("log-every", "Log progress every N episodes (0 = never)").default_value("0"));

    let eval = shared(Command::new("eval").about("Evaluate a checkpoint"), "run")
        .arg(opt("manifest", "Dataset manifest"))
        .arg(opt("checkpoint", "Checkpoint to evaluate [default: <out>/checkpoint.cplm]"))
        .arg(opt("setting", "zsl: unseen classes only; gzsl: seen and unseen").value_parser(["zsl", "gzsl"]).default_value("zsl"))
        .arg(opt("min-accuracy", "Exit 1 if the unseen accuracy (fraction) is below this"));

    let check = shared(Command::new("gradcheck").about("Check analytic gradients against finite differences"), "gradcheck")
        .arg(opt("trials", "Random configurations to check").default_value("100"))
        .arg(
            opt("inject-fault", "Deliberately corrupt the gradient")
                .value_parser(["none", "sign-flip"])
                .default_value("none")
                .hide(true),
        );

    Command::new("cpl")
        .about("Episodic prototype learning for zero-shot recognition")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("verbose")
                .short('v')
                .long("verbose")
                .action(ArgAction::Count)
                .global(true)
                .value_parser(value_parser!(u8))
                .help("More log output (repeat for more)"),
        )
        .subcommands([gen, train, eval, check])
}

fn out_dir(s: &Settings) -> Result<PathBuf, Exit> {
    let dir: PathBuf = s.require("out")?;
    fs::create_dir_all(&dir).map_err(|e| Exit::io(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn seed(s: &mut Settings) -> Result<u64, Exit> {
    let seed = s.get::<u64>("seed")?.unwrap_or(0);
    s.record("seed", seed);
    Ok(seed)
}

fn cmd_gen_synth(mut s: Settings) -> Outcome {
    let spec = SyntheticSpec {
        seen_classes: s.require("seen-classes")?,
        unseen_classes: s.require("unseen-classes")?,
        train_per_class: s.require("train-per-class")?,
        test_per_class: s.require("test-per-class")?,
        d_attr: s.require("d-attr")?,
        d_feat: s.require("d-feat")?,
        noise_sigma: s.require("noise-sigma")?,
        seed: seed(&mut s)?,
        class_budget: s.get("class-budget")?,
    };
    let data = generate_synthetic(&spec)?;
    let dir = out_dir(&s)?;
    let manifest = save_dataset_dir(&data.dataset, &dir)?;
    s.write_echo(&dir)?;
    let oracle = data.oracle_accuracy()?;
    println!(
        "wrote {} samples ({} seen, {} unseen classes) to {}",
        data.dataset.n_samples(),
        spec.seen_classes,
        spec.unseen_classes,
        manifest.display()
    );
    println!("oracle accuracy (nearest true mean, unseen classes): {:.1}%", oracle * 100.0);
    Ok(())
}

fn cmd_train(mut s: Settings) -> Outcome {
    let manifest: PathBuf = s.require("manifest")?;
    let ds = load_dataset_from(&manifest)?;
    let checkpoint = s.get::<PathBuf>("resume")?.map(load_checkpoint).transpose()?;

    // Resuming keeps the stored settings unless they are overridden.
    let (mut hp, mut options) = match &checkpoint {
        Some(ck) => (ck.hyperparams.clone(), ck.options),
        None => (HyperParams::for_dataset(&ds), Default::default()),
    };
    hp.epochs = HyperParams::default().epochs;
    macro_rules! set {
        ($key:literal, $field:expr) => {
            if let Some(v) = s.get($key)? {
                $field = v;
            }
        };
    }
    set!("lambda", hp.lambda);
    set!("gamma", hp.gamma);
    set!("c", hp.classes);
    set!("s", hp.shots);
    set!("epochs", hp.epochs);
    set!("lr", hp.learning_rate);
    set!("weight-decay", hp.weight_decay);
    set!("hidden", hp.hidden_size);
    set!("seed", hp.seed);
    let fresh = checkpoint.is_none();
    if fresh || s.is_explicit("mode") {
        options.mode = match s.require::<String>("mode")?.as_str() {
            "sample" => SamplingMode::SampleLevel,
            _ => SamplingMode::TaskLevel,
        };
    }
    if fresh || s.is_explicit("schedule") {
        options.schedule = match s.require::<String>("schedule")?.as_str() {
            "coverage" => ClassSchedule::Coverage,
            _ => ClassSchedule::Uniform,
        };
    }
    if fresh || s.is_explicit("aggregation") {
        options.aggregation = match s.require::<String>("aggregation")?.as_str() {
            "sum" => Aggregation::Sum,
            _ => Aggregation::Mean,
        };
    }
    if fresh || s.is_explicit("cep-only") {
        options.variant = if s.flag("cep-only")? { LossVariant::CepOnly } else { LossVariant::Combined };
    }
    if fresh || s.is_explicit("unit-attributes") {
        options.unit_attributes = s.flag("unit-attributes")?;
    }
    hp.validate()?;

    let dir = out_dir(&s)?;
    let mut cfg = TrainConfig::new(hp.clone());
    cfg.options = options;
    cfg.checkpoint_path = Some(dir.join("checkpoint.cplm"));
    cfg.validation_classes = s.require("validation-classes")?;
    cfg.log_every = s.require("log-every")?;

    for (k, v) in [
        ("lambda", hp.lambda.to_string()),
        ("gamma", hp.gamma.to_string()),
        ("c", hp.classes.to_string()),
        ("s", hp.shots.to_string()),
        ("epochs", hp.epochs.to_string()),
        ("lr", hp.learning_rate.to_string()),
        ("weight-decay", hp.weight_decay.to_string()),
        ("hidden", hp.hidden_size.to_string()),
        ("seed", hp.seed.to_string()),
        ("mode", options.mode.to_string()),
        ("schedule", options.schedule.to_string()),
        ("aggregation", options.aggregation.to_string()),
        ("cep-only", (options.variant == LossVariant::CepOnly).to_string()),
        ("unit-attributes", options.unit_attributes.to_string()),
    ] {
        s.record(k, v);
    }
    s.write_echo(&dir)?;

    let out = match &checkpoint {
        Some(ck) => resume(&ds, &cfg, ck)?,
        None => train(&ds, &cfg)?,
    };
    write_log_csv(dir.join("train_log.csv"), &out.log)?;

    let episodes = out.log.iter().filter(|r| r.epoch == out.log[0].epoch).count();
    println!(
        "trained {} epochs of {} episodes ({} mode, C={}, S={})",
        hp.epochs, episodes, options.mode, hp.classes, hp.shots
    );
    if let Some((epoch, loss)) = out.epoch_means().last() {
        println!("epoch {epoch} mean loss {loss:.6}");
    }
    if let Some((epoch, acc)) = out.selected {
        let mut best = out.checkpoint.clone();
        best.embedder = out.embedder.clone();
        best.hyperparams.epochs = epoch;
        save_checkpoint(&best, dir.join("selected.cplm"))?;
        println!(
            "selected epoch {epoch} (validation accuracy {:.1}%): {}",
            acc * 100.0,
            dir.join("selected.cplm").display()
        );
    }
    println!("checkpoint: {}", dir.join("checkpoint.cplm").display());
    Ok(())
}

fn cmd_eval(mut s: Settings) -> Outcome {
    let manifest: PathBuf = s.require("manifest")?;
    let dir = out_dir(&s)?;
    let ck_path = s.get::<PathBuf>("checkpoint")?.unwrap_or_else(|| dir.join("checkpoint.cplm"));
    s.record("checkpoint", ck_path.display());
    let mut ds = load_dataset_from(&manifest)?;
    let ck = load_checkpoint(&ck_path)?;
    let dims = ck.dims();
    if (dims.d_attr, dims.d_feat) != (ds.d_attr(), ds.d_feat()) {
        return Err(Exit::usage(format!(
            "checkpoint maps d_attr={} to d_feat={} but the dataset has d_attr={} and d_feat={}",
            dims.d_attr,
            dims.d_feat,
            ds.d_attr(),
            ds.d_feat()
        )));
    }
    if ck.options.unit_attributes {
        ds = ds.with_unit_attributes();
    }
    let report = match s.require::<String>("setting")?.as_str() {
        "gzsl" => evaluate_generalized(&ds, &ck.embedder)?,
        _ => evaluate_standard(&ds, &ck.embedder)?,
    };
    s.write_echo(&dir)?;

    print!("{}", report.table(&ds.class_names));
    let summary = report.summary_line();
    println!("{summary}");
    let path = dir.join("report.csv");
    fs::write(&path, format!("{}# {summary}\n", report.to_csv()))
        .map_err(|e| Exit::io(format!("cannot write {}: {e}", path.display())))?;

    if let Some(min) = s.get::<f64>("min-accuracy")? {
        if report.acc_unseen < min {
            return Err(Exit::failure(format!("acc_unseen {:.4} is below the required {min}", report.acc_unseen)));
        }
    }
    Ok(())
}

fn cmd_gradcheck(mut s: Settings) -> Outcome {
    let opts = GradcheckOptions {
        trials: s.require("trials")?,
        seed: seed(&mut s)?,
        fault: match s.require::<String>("inject-fault")?.as_str() {
            "sign-flip" => Fault::SignFlip,
            _ => Fault::None,
        },
        ..Default::default()
    };
    let dir = out_dir(&s)?;
    s.write_echo(&dir)?;
    let report = gradcheck::run(&opts)?;
    println!(
        "checked {} coordinates over {} trials; max relative error {:.3e}",
        report.coordinates, report.trials, report.max_rel_error
    );
    if report.passed() {
        return Ok(());
    }
    let worst = report.worst.expect("a failure has a worst coordinate");
    Err(Exit::failure(format!(
        "{} coordinates out of tolerance; worst: trial {} {}[{}] analytic {:e} numeric {:e}",
        report.failures, worst.trial, worst.array, worst.index, worst.analytic, worst.numeric
    )))
}

fn dispatch(root: &Command, m: &ArgMatches) -> Outcome {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cmd = root.find_subcommand(name).expect("known subcommand");
    let s = Settings::resolve(cmd, sub)?;
    match name {
        "gen-synth" => cmd_gen_synth(s),
        "train" => cmd_train(s),
        "eval" => cmd_eval(s),
        "gradcheck" => cmd_gradcheck(s),
        _ => unreachable!("unknown subcommand {name}"),
    }
}

fn main() -> ExitCode {
    let root = cli();
    let m = match root.clone().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match m.get_count("verbose") {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match dispatch(&root, &m) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
