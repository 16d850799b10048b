//! `nevlab` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
//! 3 gradient check failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use nevlab::checkpoint::Checkpoint;
use nevlab::config::PipelineConfig;
use nevlab::corpus::{build_corpus, load_retrievals, read_counts, save_retrievals};
use nevlab::data::{caption_token_counts, load_dataset, save_dataset, World};
use nevlab::eval::{ablate, eval_retrieval, eval_threads, MetricsReport};
use nevlab::gradsuite::{run_suite, STEP, TOLERANCE};
use nevlab::train::{
    frozen_hashes, refresh_captions, stage2_checkpoint, stage2_pipeline, write_curves_csv, Environment, Phase,
    Prepared, Stage1,
};

#[derive(Parser, Debug)]
#[command(name = "nevlab", version, about = "Noise-robust vision-language pre-training at desk scale")]
struct Cli {
    /// Print the embedded default configuration and exit.
    #[arg(long, global = true)]
    print_defaults: bool,
    #[command(subcommand)]
    cmd: Option<Command>,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON configuration; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `train.seed=7`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; inputs from earlier commands are read from here too.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic training and evaluation splits.
    GenData(Common),
    /// Build the concept corpus from caption noun counts.
    BuildCorpus {
        #[command(flatten)]
        common: Common,
        /// `noun<TAB>count` file used instead of the training captions.
        #[arg(long)]
        counts: Option<PathBuf>,
    },
    /// Retrieve top-k concepts for every image of both splits.
    RetrieveConcepts(Common),
    /// Run stage 1 (warm-up, estimation, noise-adaptive training, refresh, continued training).
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        /// Continue from a stage-1 checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop before this phase: estimate, contrastive, refresh, post_refresh.
        #[arg(long)]
        until: Option<String>,
    },
    /// Replace captions of likely-noisy pairs using a stage-1 checkpoint.
    RefreshCaptions {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the bridge and prefix projection through the frozen decoder.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Retrieval evaluation of a stage-1 checkpoint on the evaluation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Full, without noise adaptation, and without concepts, side by side.
    Ablate(Common),
    /// Finite-difference check of every training objective.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
    Check(String),
}

impl From<nevlab::Error> for Failure {
    fn from(e: nevlab::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, r| writeln!(buf, "level={} target={} {}", r.level(), r.target(), r.args()))
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if cli.print_defaults {
        println!("{}", serde_json::to_string_pretty(&PipelineConfig::default().to_json()).unwrap());
        return ExitCode::SUCCESS;
    }
    let Some(cmd) = cli.cmd else {
        eprintln!("no subcommand given; see `nevlab --help`");
        return ExitCode::from(1);
    };
    match run(cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}\nsee `nevlab --help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Check(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(3)
        }
    }
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::GenData(c) => gen_data(&c),
        Command::BuildCorpus { common, counts } => build(&common, counts.as_deref()),
        Command::RetrieveConcepts(c) => retrieve(&c),
        Command::TrainStage1 { common, resume, until } => stage1(&common, resume.as_deref(), until.as_deref()),
        Command::RefreshCaptions { common, checkpoint } => refresh(&common, checkpoint),
        Command::TrainStage2 { common, checkpoint } => stage2(&common, checkpoint),
        Command::Eval { common, checkpoint } => evaluate(&common, checkpoint),
        Command::Ablate(c) => ablation(&c),
        Command::Gradcheck { common, instances } => gradcheck(&common, instances),
    }
}

/// Loads and validates the configuration, creates the output directory and
/// writes the resolved snapshot for `command`.
fn setup(c: &Common, command: &str) -> Result<PipelineConfig, Failure> {
    let base = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?;
            let v = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?;
            PipelineConfig::from_json(v).map_err(|e| Failure::Usage(e.to_string()))?
        }
        None => PipelineConfig::default(),
    };
    let cfg = base.with_overrides(&c.overrides).map_err(|e| Failure::Usage(e.to_string()))?;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    fs::create_dir_all(&c.out)?;
    let snapshot = serde_json::to_string_pretty(&cfg.to_json()).unwrap();
    fs::write(c.out.join(format!("{command}.config.json")), snapshot + "\n")?;
    info!("event=start command={command} out={}", c.out.display());
    Ok(cfg)
}

fn input(out: &Path, name: &str) -> Result<PathBuf, Failure> {
    let p = out.join(name);
    if p.exists() {
        Ok(p)
    } else {
        Err(Failure::Usage(format!("missing input {}; run the earlier command first", p.display())))
    }
}

fn write_json(path: &Path, v: &serde_json::Value) -> Outcome {
    fs::write(path, serde_json::to_string_pretty(v).unwrap() + "\n")?;
    info!("event=wrote path={}", path.display());
    Ok(())
}

fn environment(cfg: &PipelineConfig, out: &Path) -> Result<Environment, Failure> {
    let counts = read_counts(&input(out, "corpus.tsv")?)?;
    Ok(Environment::with_corpus(cfg, build_corpus(&counts, cfg.corpus.min_count)?)?)
}

fn prepared(env: &Environment, out: &Path, split: &str) -> Result<Prepared, Failure> {
    let samples = load_dataset(&input(out, &format!("{split}.jsonl"))?)?;
    let concepts = load_retrievals(&input(out, &format!("concepts_{split}.jsonl"))?)?;
    Ok(env.prepare(samples, Some(&concepts))?)
}

fn gen_data(c: &Common) -> Outcome {
    let cfg = setup(c, "gen-data")?;
    let world = World::new(&cfg.world)?;
    let train = world.generate_dataset()?;
    save_dataset(&train, &c.out.join("train.jsonl"))?;
    save_dataset(&world.generate_eval_split(), &c.out.join("eval.jsonl"))?;
    let noisy = train.iter().filter(|s| s.is_noisy).count();
    info!("event=gen_data train={} noisy={noisy}", train.len());
    Ok(())
}

fn build(c: &Common, counts: Option<&Path>) -> Outcome {
    let cfg = setup(c, "build-corpus")?;
    let counts = match counts {
        Some(p) => read_counts(p)?,
        None => caption_token_counts(&load_dataset(&input(&c.out, "train.jsonl")?)?),
    };
    let corpus = build_corpus(&counts, cfg.corpus.min_count)?;
    fs::write(c.out.join("corpus.tsv"), corpus.to_tsv())?;
    info!("event=corpus nouns={} min_count={}", corpus.len(), corpus.min_count());
    Ok(())
}

fn retrieve(c: &Common) -> Outcome {
    let cfg = setup(c, "retrieve-concepts")?;
    let env = environment(&cfg, &c.out)?;
    for split in ["train", "eval"] {
        let samples = load_dataset(&input(&c.out, &format!("{split}.jsonl"))?)?;
        let found = samples.iter().map(|s| env.retrieve(s)).collect::<nevlab::Result<Vec<_>>>()?;
        save_retrievals(&found, &c.out.join(format!("concepts_{split}.jsonl")))?;
        info!("event=retrieved split={split} images={}", found.len());
    }
    Ok(())
}

fn parse_phase(s: &str) -> Result<Phase, Failure> {
    serde_json::from_value(json!(s)).map_err(|_| Failure::Usage(format!("unknown phase `{s}`")))
}

fn stage1(c: &Common, resume: Option<&Path>, until: Option<&str>) -> Outcome {
    let mut cfg = setup(c, "train-stage1")?;
    let until = until.map(parse_phase).transpose()?.unwrap_or(Phase::Done);
    let started = Instant::now();
    let mut s1 = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            cfg = PipelineConfig::from_json(ck.meta["config"].clone())?;
            let env = environment(&cfg, &c.out)?;
            Stage1::resume(&ck, prepared(&env, &c.out, "train")?)?
        }
        None => {
            let env = environment(&cfg, &c.out)?;
            Stage1::new(&cfg, prepared(&env, &c.out, "train")?)?
        }
    };
    while s1.upcoming() != until && s1.advance()? {}
    let env = environment(&cfg, &c.out)?;
    s1.save(&c.out.join("stage1.ckpt"))?;
    save_dataset(&s1.data.samples, &c.out.join("train_revised.jsonl"))?;
    write_curves_csv(&s1.curves, &c.out.join("curves.csv"))?;
    if let Some(n) = &s1.noise {
        write_json(&c.out.join("noise.json"), &n.to_json())?;
    }
    write_json(&c.out.join("metrics.json"), &serde_json::to_value(MetricsReport::from_stage1(&s1, &env)).unwrap())?;
    write_timing(&c.out, "train-stage1", started)?;
    info!("event=stage1_done phase={:?} global_step={}", s1.upcoming(), s1.global_step);
    Ok(())
}

fn write_timing(out: &Path, command: &str, started: Instant) -> Outcome {
    let secs = started.elapsed().as_secs_f64();
    info!("event=timing command={command} seconds={secs:.3}");
    write_json(&out.join(format!("{command}.timing.json")), &json!({"command": command, "seconds": secs}))
}

fn load_stage1(c: &Common, checkpoint: Option<PathBuf>, cfg: &PipelineConfig) -> Result<(Stage1, Environment), Failure> {
    let path = match checkpoint {
        Some(p) => p,
        None => input(&c.out, "stage1.ckpt")?,
    };
    let ck = Checkpoint::load(&path)?;
    let saved = PipelineConfig::from_json(ck.meta["config"].clone())?;
    if saved.model != cfg.model {
        return Err(Failure::Usage("checkpoint model configuration differs from the resolved one".into()));
    }
    let env = environment(&saved, &c.out)?;
    let s1 = Stage1::resume(&ck, prepared(&env, &c.out, "train")?)?;
    Ok((s1, env))
}

fn refresh(c: &Common, checkpoint: Option<PathBuf>) -> Outcome {
    let cfg = setup(c, "refresh-captions")?;
    let (mut s1, _) = load_stage1(c, checkpoint, &cfg)?;
    let Some(noise) = s1.noise.clone() else {
        return Err(Failure::Usage("checkpoint has no noise estimate; train past the estimate phase".into()));
    };
    let n = refresh_captions(
        &s1.model,
        &mut s1.data,
        &noise.epsilon,
        cfg.train.refresh_threshold,
        cfg.train.use_concepts,
    )?;
    save_dataset(&s1.data.samples, &c.out.join("revised.jsonl"))?;
    info!("event=refresh_done replaced={n}");
    Ok(())
}

fn stage2(c: &Common, checkpoint: Option<PathBuf>) -> Outcome {
    let cfg = setup(c, "train-stage2")?;
    let started = Instant::now();
    let (s1, env) = load_stage1(c, checkpoint, &cfg)?;
    let env = Environment::with_corpus(&cfg, env.corpus)?;
    let heldout = prepared(&env, &c.out, "eval")?;
    let (lm, _) = env.pretrain_decoder()?;
    let run = stage2_pipeline(&env, lm, &s1.model, &s1.data, &heldout)?;
    stage2_checkpoint(&cfg, &run.bridge, &run.fc, &env, &run.lm).save(&c.out.join("stage2.ckpt"))?;
    let mut report = MetricsReport::from_stage1(&s1, &env);
    report.frozen_hashes = frozen_hashes(&env, Some(&run.lm));
    info!(
        "event=stage2_done heldout_before={:.6} heldout_after={:.6}",
        run.report.heldout_before, run.report.heldout_after
    );
    report.stage2 = Some(run.report);
    write_json(&c.out.join("stage2_metrics.json"), &serde_json::to_value(report).unwrap())?;
    write_timing(&c.out, "train-stage2", started)
}

fn evaluate(c: &Common, checkpoint: Option<PathBuf>) -> Outcome {
    let cfg = setup(c, "eval")?;
    let (s1, env) = load_stage1(c, checkpoint, &cfg)?;
    let heldout = prepared(&env, &c.out, "eval")?;
    let t = &s1.cfg.train;
    let r = eval_retrieval(&s1.model, &heldout, t.tau, cfg.train.k_candidates, t.use_concepts, eval_threads())?;
    let mut report = MetricsReport::from_stage1(&s1, &env);
    report.retrieval = Some(r);
    info!(
        "event=eval i2t_r1={:.4} i2t_r5={:.4} t2i_r1={:.4} t2i_r5={:.4}",
        r.i2t_r1, r.i2t_r5, r.t2i_r1, r.t2i_r5
    );
    write_json(&c.out.join("eval.json"), &serde_json::to_value(report).unwrap())
}

fn ablation(c: &Common) -> Outcome {
    let cfg = setup(c, "ablate")?;
    let started = Instant::now();
    let world = World::new(&cfg.world)?;
    let train = world.generate_dataset()?;
    let eval = world.generate_eval_split();
    let rows = ablate(&cfg, &train, &eval, eval_threads())?;
    println!("variant\tmean_r1\ti2t_r1\ti2t_r5\tt2i_r1\tt2i_r5\tnoise_auc");
    for r in &rows {
        let auc = r.noise_auc.map_or("-".to_string(), |a| format!("{a:.4}"));
        let x = &r.recalls;
        println!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{auc}",
            r.variant, r.mean_r1, x.i2t_r1, x.i2t_r5, x.t2i_r1, x.t2i_r5
        );
    }
    write_json(&c.out.join("ablation.json"), &serde_json::to_value(&rows).unwrap())?;
    write_timing(&c.out, "ablate", started)
}

fn gradcheck(c: &Common, instances: usize) -> Outcome {
    let cfg = setup(c, "gradcheck")?;
    if instances == 0 {
        return Err(Failure::Usage("--instances must be positive".into()));
    }
    let rows = run_suite(instances, cfg.train.seed)?;
    println!("loss\tinstances\tmax_rel_err\tstatus");
    for r in &rows {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{}\t{}\t{:.3e}\t{status}", r.loss, r.instances, r.max_rel_err);
    }
    write_json(&c.out.join("gradcheck.json"), &json!({"step": STEP, "tolerance": TOLERANCE, "rows": rows}))?;
    match rows.iter().find(|r| !r.passed()) {
        Some(r) => Err(Failure::Check(format!("{} relative error {:e} > {TOLERANCE:e}", r.loss, r.max_rel_err))),
        None => Ok(()),
    }
}
