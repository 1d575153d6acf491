//! `spl`: generate worlds, pretrain, run episodes and ablations.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
//! 4 internal invariant violation (including a failed `validate`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use spl_core::config::{parse_config, RunConfig};
use spl_core::datamodel::{validate_world, EpisodeSpec, Variant};
use spl_core::evalharness::{ablate, pretrain, run_episode, WorldSource};
use spl_core::persist;
use spl_core::rng::derive_seed;
use spl_core::shallownet::{Classifier, TrainConfig};
use spl_core::synthworld::{make_world, World};
use spl_core::{Error, ErrorKind, Result};

#[derive(Parser, Debug)]
#[command(
    name = "spl",
    version,
    about = "Self-paced selection of hallucinated samples"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Shared {
    /// JSON configuration; unspecified keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a synthetic world and write world.json.
    GenWorld {
        #[command(flatten)]
        shared: Shared,
    },
    /// Pretrain D on the base classes and write classifier_D.json.
    Pretrain {
        #[command(flatten)]
        shared: Shared,
        /// World to train on; generated from the configuration when absent.
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Run one k-shot episode and write episode_<hash>.json.
    Episode {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        k: usize,
        /// Record wall-clock time in the result.
        #[arg(long)]
        timing: bool,
    },
    /// Run every configured (variant, k, seed) episode and write ablation.csv.
    ///
    /// With --world and --classifier every seed shares them; otherwise each
    /// seed gets its own world and pretraining.
    Ablate {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, requires = "classifier")]
        world: Option<PathBuf>,
        #[arg(long, requires = "world")]
        classifier: Option<PathBuf>,
    },
    /// Check a world file for structural violations.
    Validate {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        world: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenWorld { .. } => "gen-world",
            Command::Pretrain { .. } => "pretrain",
            Command::Episode { .. } => "episode",
            Command::Ablate { .. } => "ablate",
            Command::Validate { .. } => "validate",
        }
    }

    fn shared(&self) -> &Shared {
        match self {
            Command::GenWorld { shared }
            | Command::Pretrain { shared, .. }
            | Command::Episode { shared, .. }
            | Command::Ablate { shared, .. }
            | Command::Validate { shared, .. } => shared,
        }
    }
}

/// Everything needed to replay a run: the resolved configuration, every
/// derived seed, and digests of the files read and written.
#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    root_seed: u64,
    config: RunConfig,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn new(command: &Command) -> Result<Self> {
        let shared = command.shared();
        let mut cfg = match &shared.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
                parse_config(&text).map_err(|e| e.context(format!("in {}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = shared.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &shared.out {
            cfg.output_dir = out.clone();
        }
        let out = cfg.output_dir.clone();
        std::fs::create_dir_all(&out)
            .map_err(|e| Error::from(e).context(format!("creating {}", out.display())))?;
        Ok(Self {
            manifest: Manifest {
                command: command.name().to_string(),
                root_seed: cfg.seed,
                config: cfg.clone(),
                seeds: BTreeMap::new(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
            },
            cfg,
            out,
        })
    }

    fn seed(&mut self, phase: &str) -> u64 {
        let seed = derive_seed(self.cfg.seed, phase, 0);
        self.manifest.seeds.insert(phase.to_string(), seed);
        seed
    }

    fn read<T: serde::de::DeserializeOwned>(&mut self, path: &Path) -> Result<T> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        self.manifest
            .inputs
            .insert(path.display().to_string(), sha256_hex(&bytes));
        let text = String::from_utf8_lossy(&bytes);
        persist::from_json_str(&text).map_err(|e| e.context(format!("parsing {}", path.display())))
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        std::fs::write(&path, text)
            .map_err(|e| Error::from(e).context(format!("writing {}", path.display())))?;
        self.manifest
            .outputs
            .insert(name.to_string(), sha256_hex(text.as_bytes()));
        Ok(path)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let text = persist::to_json_string(value)?;
        self.write_text(name, &text)
    }

    fn finish(self) -> Result<()> {
        let name = format!("manifest_{}.json", self.manifest.command);
        persist::write_json(&self.out.join(name), &self.manifest)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn generate_world(run: &mut Run) -> Result<World> {
    let seed = run.seed("world");
    make_world(&run.cfg.world, seed)
}

fn pretrain_world(run: &mut Run, world: &World) -> Result<Classifier> {
    let cfg = TrainConfig {
        shuffle_seed: run.seed("pretrain-shuffle"),
        ..run.cfg.pretrain.clone()
    };
    let init = run.seed("pretrain-init");
    pretrain(world, run.cfg.model.hidden_dim, &cfg, init)
}

fn execute(command: &Command) -> Result<()> {
    let mut run = Run::new(command)?;
    match command {
        Command::GenWorld { .. } => {
            let world = generate_world(&mut run)?;
            let path = run.write_json("world.json", &world)?;
            println!("{}", path.display());
        }
        Command::Pretrain { world, .. } => {
            let world: World = match world {
                Some(path) => run.read(path)?,
                None => generate_world(&mut run)?,
            };
            let d = pretrain_world(&mut run, &world)?;
            let path = run.write_json("classifier_D.json", &d)?;
            println!("{}  {}", path.display(), d.weight_hash());
        }
        Command::Episode {
            shared,
            world,
            classifier,
            variant,
            k,
            timing,
        } => {
            let world: World = run.read(world)?;
            let d: Classifier = run.read(classifier)?;
            let seed = shared.seed.unwrap_or(run.cfg.seed);
            let spec = EpisodeSpec {
                k_shot: *k,
                variant: *variant,
                seed,
                metric_ks: run.cfg.episodes.metric_ks.clone(),
            };
            run.manifest.seeds.insert("episode".into(), seed);
            let mut result = run_episode(&world, &spec, &run.cfg.settings(), &d)?;
            if !timing {
                result.timing_seconds = None;
            }
            let key = serde_json::to_string(&(&spec, &run.manifest.inputs, &run.cfg.settings()))?;
            let name = format!("episode_{}.json", &sha256_hex(key.as_bytes())[..16]);
            let path = run.write_json(&name, &result)?;
            for t in &result.topk {
                println!("top-{} {:.4}", t.k, t.accuracy);
            }
            println!("{}", path.display());
        }
        Command::Ablate {
            world, classifier, ..
        } => {
            let source = match (world, classifier) {
                (Some(w), Some(c)) => WorldSource::Fixed {
                    world: run.read(w)?,
                    classifier: run.read(c)?,
                },
                _ => WorldSource::PerSeed {
                    config: run.cfg.world.clone(),
                    hidden: run.cfg.model.hidden_dim,
                    pretrain: run.cfg.pretrain.clone(),
                },
            };
            for &s in &run.cfg.episodes.seeds {
                run.manifest.seeds.insert(format!("episode-{s}"), s);
            }
            let table = ablate(
                &source,
                &run.cfg.plan(),
                &run.cfg.settings(),
                Some(&run.out),
            )?;
            let csv = table.to_csv()?;
            run.manifest
                .outputs
                .insert("ablation.csv".into(), sha256_hex(csv.as_bytes()));
            print!("{}", table.summary());
        }
        Command::Validate { world, .. } => {
            let world: World = run.read(world)?;
            let violations = validate_world(&world);
            for v in &violations {
                println!("{v}");
            }
            if !violations.is_empty() {
                run.finish()?;
                return Err(Error::Invariant(format!(
                    "world has {} violation(s)",
                    violations.len()
                )));
            }
            println!("ok");
        }
    }
    run.finish()
}

fn exit_code(err: &Error) -> u8 {
    match err.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Internal => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
