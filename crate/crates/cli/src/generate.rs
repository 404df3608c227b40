use std::fs;
use std::path::PathBuf;

use avcap::data::{generate, split, to_jsonl};
use avcap::TaskSpec;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, WithPath};
use crate::run::{resolve, RunDir};

#[derive(Args, Serialize)]
pub struct GenerateArgs {
    /// JSON config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task spec JSON; defaults to the built-in pretraining task.
    #[arg(long = "spec")]
    spec_file: Option<PathBuf>,
    /// Use the built-in video-critical fine-tuning task instead.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    downstream: Option<bool>,
    #[arg(long)]
    n: Option<usize>,
    /// Overrides the task's sample seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub spec_file: Option<PathBuf>,
    pub downstream: bool,
    pub n: usize,
    pub seed: Option<u64>,
    pub split: [f64; 3],
    pub out: PathBuf,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig { spec_file: None, downstream: false, n: 1000, seed: None, split: [0.8, 0.1, 0.1], out: PathBuf::new() }
    }
}

#[derive(Serialize)]
struct Resolved<'a> {
    #[serde(flatten)]
    config: &'a GenerateConfig,
    spec: TaskSpec,
}

pub fn run(args: GenerateArgs) -> CliResult<()> {
    let cfg: GenerateConfig = resolve(&args)?;
    let mut spec = match (&cfg.spec_file, cfg.downstream) {
        (Some(_), true) => return Err(CliError::usage("--spec and --downstream are mutually exclusive")),
        (Some(p), false) => {
            let text = fs::read_to_string(p).at(p)?;
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: invalid spec: {e}", p.display())))?
        }
        (None, true) => TaskSpec::downstream(),
        (None, false) => TaskSpec::default(),
    };
    if let Some(seed) = cfg.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let dir = RunDir::create(&cfg.out, "generate", &Resolved { config: &cfg, spec })?;
    let samples = generate(&spec, cfg.n)?;
    let (train, val, test) = split(&samples, cfg.split)?;
    dir.json("spec.json", &spec)?;
    dir.json("vocab.json", &spec.vocab().sidecar())?;
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        dir.write(&format!("{name}.jsonl"), &to_jsonl(part))?;
    }
    println!("wrote {}/{}/{} samples to {}", train.len(), val.len(), test.len(), dir.path().display());
    dir.finish()
}
