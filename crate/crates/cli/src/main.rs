use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cheems::checkpoint;
use cheems::config::{hash_trailer, write_atomic, RunConfig};
use cheems::harness::{bench_csv, bench_throughput, eval_set, evaluate, Trainer, METRICS_HEADER};
use cheems::model::Model;
use cheems::selftest;
use cheems::vectors;
use cheems::Error;

#[derive(Parser)]
#[command(name = "cheems", version, about = "Hybrid SSD / attention / product-key MoE language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run config; omitted keys take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Dotted-path override such as `model.d_model=64` (repeatable).
    #[arg(short = 'o', long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured task; writes a checkpoint, metrics and expert usage.
    Train(ConfigArgs),
    /// Masked accuracy of a checkpoint on its held-out set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Throughput sweep over sequence lengths.
    Bench(ConfigArgs),
    /// Run every invariant suite.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write JSON test vectors.
    ExportVectors {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Random cases per layer kind.
        #[arg(long, default_value_t = 20)]
        per_kind: usize,
    },
    /// Print the fully resolved config.
    Config(ConfigArgs),
}

impl ConfigArgs {
    fn load(&self) -> cheems::Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p, &self.overrides),
            None => RunConfig::from_json("{}", &self.overrides),
        }
    }
}

fn write_csv(path: &Path, body: &str, hash: &str) -> cheems::Result<()> {
    write_atomic(path, format!("{body}{}", hash_trailer(hash)).as_bytes())
}

fn train(args: &ConfigArgs) -> cheems::Result<()> {
    let cfg = args.load()?;
    let hash = cfg.hash();
    let out = &cfg.output;
    let mut model = Model::<f32>::build(&cfg.model)?;
    eprintln!("model {} parameters, config {}", model.count_params(), &hash[..12]);

    let metrics_path = out.path(&out.metrics);
    let mut metrics = format!("{METRICS_HEADER}\n");
    let mut trainer = Trainer::new(&mut model, &cfg.train, cfg.seed)?;
    let every = cfg.train.eval_every.max(1);
    let result = trainer.run(|row| {
        metrics.push_str(&row.csv_line());
        metrics.push('\n');
        if (row.step + 1) % every == 0 {
            eprintln!("step {} loss {:.4} acc {:.3}", row.step + 1, row.loss, row.acc);
            write_csv(&metrics_path, &metrics, &hash)?;
        }
        Ok(())
    });
    drop(trainer);
    write_csv(&metrics_path, &metrics, &hash)?;
    // Parameters are untouched by a failed step, so this is the last good state.
    checkpoint::save(&out.path(&out.checkpoint), &cfg, &model.params)?;
    let report = result?;

    let mut usage = String::from("layer,expert_id,hit_count\n");
    for (layer, u) in report.usage.iter().enumerate() {
        for line in u.to_csv().lines().skip(1) {
            usage.push_str(&format!("{layer},{line}\n"));
        }
    }
    write_csv(&out.path(&out.expert_usage), &usage, &hash)?;
    let summary = serde_json::json!({
        "config_hash": hash,
        "steps_run": report.steps_run,
        "final_loss": report.final_loss,
        "final_eval_acc": report.final_eval_acc,
        "evals": report.evals,
    });
    write_atomic(&out.path(&out.summary), format!("{summary:#}\n").as_bytes())?;
    println!("final_eval_acc {}", report.final_eval_acc);
    Ok(())
}

fn eval(path: &Path, args: &ConfigArgs) -> cheems::Result<()> {
    let ck = checkpoint::read(path)?;
    let cfg = if args.config.is_some() || !args.overrides.is_empty() {
        let cfg = args.load()?;
        if cfg.hash() != ck.header.config_hash {
            eprintln!(
                "warning: config hash {} differs from checkpoint {}",
                &cfg.hash()[..12],
                &ck.header.config_hash[..12]
            );
        }
        cfg
    } else {
        ck.header.config.clone()
    };
    let model: Model<f32> = ck.model()?;
    let t = &cfg.train;
    let batches = eval_set(&t.task, cfg.seed, t.eval_batches, t.batch_size)?;
    let res = evaluate(&model, &batches)?;
    println!("acc {}", res.acc);
    println!("loss {}", res.loss);
    Ok(())
}

fn bench(args: &ConfigArgs) -> cheems::Result<()> {
    let cfg = args.load()?;
    let rows = bench_throughput(&cfg.bench, |r| eprintln!("{}", r.csv_line()))?;
    let path = cfg.output.path(&cfg.output.bench);
    write_csv(&path, &bench_csv(&rows), &cfg.hash())?;
    println!("{}", path.display());
    Ok(())
}

fn selftest(seed: u64) -> bool {
    let mut ok = true;
    let (mut pass, mut fail) = (0, 0);
    selftest::run_all(seed, |r| {
        println!("{:<22} {:>3} passed {:>3} failed  {:.2}s", r.suite, r.passed(), r.failed(), r.seconds);
        for c in r.checks.iter().filter(|c| !c.passed) {
            println!("  FAIL {}: {}", c.name, c.detail);
        }
        ok &= r.failed() == 0;
        pass += r.passed();
        fail += r.failed();
    });
    println!("total {pass} passed {fail} failed");
    ok
}

fn export_vectors(args: &ConfigArgs, per_kind: usize) -> cheems::Result<()> {
    let cfg = args.load()?;
    let file = vectors::generate(cfg.seed, per_kind, &cfg.hash())?;
    let path = cfg.output.path(&cfg.output.vectors);
    write_atomic(&path, file.to_json()?.as_bytes())?;
    println!("{} ({} cases)", path.display(), file.cases.len());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::UnknownKey(_) => 2,
        Error::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval { checkpoint, cfg } => eval(checkpoint, cfg),
        Command::Bench(a) => bench(a),
        Command::Selftest { seed } => {
            return if selftest(*seed) { ExitCode::SUCCESS } else { ExitCode::FAILURE };
        }
        Command::ExportVectors { cfg, per_kind } => export_vectors(cfg, *per_kind),
        Command::Config(a) => a.load().map(|c| println!("{}", serde_json::to_string_pretty(&c).expect("config serializes"))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
