use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use augsel::batch::{plan_epochs, BatchSpec};
use augsel::gradcheck::{check_ce, check_triplet};
use augsel::lof::LofScope;
use augsel::metric::{Population, Statistic};
use augsel::pipeline::{export_selection, import_selection, run_pipeline, SamplingConfig};
use augsel::store::{align_spaces, load_dataset, write_binary, Format, Space, StoreError};
use augsel::synth::{gen_synthetic, verify_suite, PlantFractions, SceneSpec};
use augsel::{json, Error};
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::{json as js, Value};

#[derive(Parser, Debug)]
#[command(
    name = "augsel",
    version,
    about = "Select useful generated augmentation images from their embeddings"
)]
struct Cli {
    /// Worker threads for within-stage parallelism (0 = all cores). Outputs do not depend on it.
    #[arg(long, global = true, env = "AUGSEL_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the selection and write a manifest.
    Sample(SampleArgs),
    /// Summarize a manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Write a synthetic scene with planted generated images.
    Synth(SynthArgs),
    /// Plan identity-balanced batches from the real images and a manifest's kept set.
    BatchPlan(BatchArgs),
    /// Finite-difference checks of the loss gradients.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare the pipeline with the naive reference on random scenes.
    Verify {
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StatArg {
    Median,
    Mean,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PopulationArg {
    All,
    RealOnly,
    GeneratedOnly,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ScopeArg {
    PerIdentity,
    Global,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Consistency-space embeddings (.augs binary, or .txt text lines).
    #[arg(long)]
    consistency: PathBuf,
    /// Diversity-space embeddings (.augs binary, or .txt text lines).
    #[arg(long)]
    diversity: PathBuf,
    /// JSON config using the manifest's config key names (default: none).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Consistency threshold statistic.
    #[arg(long, value_enum, default_value = "median")]
    tc: StatArg,
    /// Diversity threshold statistic.
    #[arg(long, value_enum, default_value = "median")]
    td: StatArg,
    /// Images feeding the consistency threshold.
    #[arg(long, value_enum, default_value = "all")]
    tc_population: PopulationArg,
    /// Images feeding the diversity threshold.
    #[arg(long, value_enum, default_value = "all")]
    td_population: PopulationArg,
    /// Fixed consistency threshold for every identity (default: none).
    #[arg(long)]
    tc_override: Option<f64>,
    /// Fixed diversity threshold for every identity (default: none).
    #[arg(long)]
    td_override: Option<f64>,
    /// Drop probability for high-density images.
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    /// LOF neighbor count, capped at scope size - 1.
    #[arg(long, default_value_t = 20)]
    lof_k: usize,
    /// LOF at or below this marks an image high-density.
    #[arg(long, default_value_t = 1.0)]
    lof_theta: f64,
    /// Population each LOF score is computed within.
    #[arg(long, value_enum, default_value = "per-identity")]
    lof_scope: ScopeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    identities: usize,
    #[arg(long, default_value_t = 20)]
    reals: usize,
    #[arg(long, default_value_t = 20)]
    fakes: usize,
    #[arg(long, default_value_t = 16)]
    dim_c: usize,
    #[arg(long, default_value_t = 16)]
    dim_d: usize,
    #[arg(long, default_value_t = 1.0)]
    spread: f64,
    /// Plant displacement in units of the cluster spread.
    #[arg(long, default_value_t = 10.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.5)]
    good: f64,
    #[arg(long, default_value_t = 0.25)]
    id_violating: f64,
    #[arg(long, default_value_t = 0.25)]
    duplicate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving consistency.augs, diversity.augs and plants.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct BatchArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Dataset supplying the real images (either space).
    #[arg(long)]
    dataset: PathBuf,
    /// Identities per batch.
    #[arg(long, default_value_t = 6)]
    identities: usize,
    /// Real images per identity.
    #[arg(long, default_value_t = 9)]
    reals: usize,
    /// Generated images per identity.
    #[arg(long, default_value_t = 3)]
    fakes: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Validation(e.to_string())
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn load(path: &Path, space: Space) -> Result<augsel::EmbeddingDataset, Failure> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("txt") => Format::TextLines { space },
        _ => Format::Binary,
    };
    load_dataset(path, format).map_err(|e| match e {
        StoreError::Io(io) => io_failure(path, io),
        other => Failure::Validation(format!("{}: {other}", path.display())),
    })
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn set_path(root: &mut Value, path: &[&str], value: Value) {
    let mut cur = root;
    for key in &path[..path.len() - 1] {
        cur = cur
            .as_object_mut()
            .unwrap()
            .entry(key.to_string())
            .or_insert_with(|| js!({}));
    }
    cur.as_object_mut()
        .unwrap()
        .insert(path[path.len() - 1].to_string(), value);
}

fn statistic(s: StatArg) -> Statistic {
    match s {
        StatArg::Median => Statistic::Median,
        StatArg::Mean => Statistic::Mean,
    }
}

fn population(p: PopulationArg) -> Population {
    match p {
        PopulationArg::All => Population::All,
        PopulationArg::RealOnly => Population::RealOnly,
        PopulationArg::GeneratedOnly => Population::GeneratedOnly,
    }
}

/// Defaults, then the config file, then flags given on the command line.
fn sampling_config(args: &SampleArgs, matches: &ArgMatches) -> Result<SamplingConfig, Failure> {
    let mut value = serde_json::to_value(SamplingConfig::default()).unwrap();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
        if !file.is_object() {
            return Err(Failure::Validation(format!(
                "{}: config must be a JSON object",
                path.display()
            )));
        }
        merge(&mut value, file);
    }
    let scope = match args.lof_scope {
        ScopeArg::PerIdentity => LofScope::PerIdentity,
        ScopeArg::Global => LofScope::Global,
    };
    let flags: [(&str, &[&str], Value); 11] = [
        ("tc", &["tc_policy", "statistic"], js!(statistic(args.tc))),
        ("td", &["td_policy", "statistic"], js!(statistic(args.td))),
        (
            "tc_population",
            &["tc_policy", "population"],
            js!(population(args.tc_population)),
        ),
        (
            "td_population",
            &["td_policy", "population"],
            js!(population(args.td_population)),
        ),
        ("tc_override", &["tc_override"], js!(args.tc_override)),
        ("td_override", &["td_override"], js!(args.td_override)),
        ("alpha", &["lof", "alpha"], js!(args.alpha)),
        ("lof_k", &["lof", "k"], js!(args.lof_k)),
        ("lof_theta", &["lof", "theta"], js!(args.lof_theta)),
        ("lof_scope", &["lof", "scope"], js!(scope)),
        ("seed", &["seed"], js!(args.seed)),
    ];
    for (id, path, v) in flags {
        if matches.value_source(id) == Some(ValueSource::CommandLine) {
            set_path(&mut value, path, v);
        }
    }
    let config: SamplingConfig =
        serde_json::from_value(value).map_err(|e| Failure::Validation(format!("config: {e}")))?;
    config
        .validate()
        .map_err(|e| Failure::Validation(e.to_string()))?;
    Ok(config)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn run(cli: Cli, matches: &ArgMatches) -> Result<(), Failure> {
    match cli.command {
        Command::Sample(args) => {
            let sub = matches.subcommand_matches("sample").unwrap();
            let config = sampling_config(&args, sub)?;
            let c = load(&args.consistency, Space::Consistency)?;
            let d = load(&args.diversity, Space::Diversity)?;
            let pair = align_spaces(c, d).map_err(Error::from)?;
            let manifest = run_pipeline(&pair, &config).map_err(Error::from)?;
            export_selection(&manifest, &args.out).map_err(Error::from)?;
            let s = &manifest.summary;
            println!(
                "kept {} of {} generated images (consistency {}, diversity {}, sampled {}, lof dropped {})",
                s.kept, s.generated_images, s.consistency_candidates, s.diversity_candidates, s.sampled, s.lof_dropped
            );
        }
        Command::Stats { manifest } => {
            let m = import_selection(&manifest).map_err(Error::from)?;
            let s = &m.summary;
            for (name, v) in [
                ("identities", s.identities),
                ("real_images", s.real_images),
                ("generated_images", s.generated_images),
                ("consistency_candidates", s.consistency_candidates),
                ("diversity_candidates", s.diversity_candidates),
                ("sampled", s.sampled),
                ("lof_scored", s.lof_scored),
                ("high_density", s.high_density),
                ("lof_dropped", s.lof_dropped),
                ("lof_survivors", s.lof_survivors),
                ("kept", s.kept),
            ] {
                println!("{name:<24}{v}");
            }
            let per = m.per_identity();
            let with_kept = per.values().filter(|c| c.kept > 0).count();
            println!("{:<24}{with_kept}/{}", "identities_with_kept", per.len());
            if s.generated_images > 0 {
                println!(
                    "{:<24}{:.4}",
                    "kept_fraction",
                    s.kept as f64 / s.generated_images as f64
                );
            }
        }
        Command::Synth(a) => {
            let spec = SceneSpec {
                num_identities: a.identities,
                reals_per_id: a.reals,
                fakes_per_id: a.fakes,
                dim_c: a.dim_c,
                dim_d: a.dim_d,
                cluster_spread: a.spread,
                separation: a.separation,
                fractions: PlantFractions {
                    good: a.good,
                    id_violating: a.id_violating,
                    duplicate: a.duplicate,
                },
                seed: a.seed,
            };
            let scene = gen_synthetic(&spec).map_err(Error::from)?;
            fs::create_dir_all(&a.out_dir).map_err(|e| io_failure(&a.out_dir, e))?;
            write_binary(scene.pair.consistency(), a.out_dir.join("consistency.augs"))
                .map_err(Error::from)?;
            write_binary(scene.pair.diversity(), a.out_dir.join("diversity.augs"))
                .map_err(Error::from)?;
            let sidecar =
                json::to_canonical_string(&js!({"scene": spec, "plants": scene.plants})).unwrap();
            write_text(&a.out_dir.join("plants.json"), &sidecar)?;
            println!(
                "wrote {} images to {}",
                scene.pair.consistency().len(),
                a.out_dir.display()
            );
        }
        Command::BatchPlan(a) => {
            let m = import_selection(&a.manifest).map_err(Error::from)?;
            let ds = load(&a.dataset, Space::Consistency)?;
            let (real, _) = ds.pools();
            let spec = BatchSpec {
                identities: a.identities,
                reals: a.reals,
                fakes: a.fakes,
                seed: a.seed,
            };
            let plans = plan_epochs(&real, &m.kept_pool(), &spec, a.epochs).map_err(Error::from)?;
            write_text(&a.out, &json::to_canonical_string(&plans).unwrap())?;
            let batches: usize = plans.iter().map(|p| p.batches.len()).sum();
            println!(
                "planned {batches} batches of {} over {} epochs",
                spec.batch_size(),
                a.epochs
            );
        }
        Command::GradCheck { instances, seed } => {
            let reports = [
                check_ce(instances, seed),
                check_triplet(instances, seed.wrapping_add(1)),
            ];
            for r in &reports {
                println!(
                    "{} {:<20} instances={} max_rel_err={:.3e} failures={}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.instances,
                    r.max_relative_error,
                    r.failures
                );
            }
            if !reports.iter().all(|r| r.passed()) {
                return Err(Failure::Validation("gradient check failed".into()));
            }
        }
        Command::Verify { scenes, seed } => {
            let outcomes = verify_suite(scenes, seed).map_err(Error::from)?;
            for (i, o) in outcomes.iter().enumerate() {
                println!(
                    "{} scene {i:>3}: {} ids x {} fakes, pipeline kept {}, oracle kept {}, lof dropped {}",
                    if o.equal { "PASS" } else { "FAIL" },
                    o.scene.num_identities,
                    o.scene.fakes_per_id,
                    o.pipeline_kept,
                    o.oracle_kept,
                    o.lof_dropped
                );
            }
            let failed = outcomes.iter().filter(|o| !o.equal).count();
            if failed > 0 {
                return Err(Failure::Validation(format!(
                    "{failed} of {scenes} scenes differ from the reference"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: threads: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| run(cli, &matches)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
