use std::fs;
use std::path::{Path, PathBuf};

use avcap::analysis::{ars_corpus, normalize, scr, stopwords_version, ArsTable, FreqTable};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, WithPath};
use crate::run::{resolve, RunDir};

#[derive(Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// One caption per line, paired line by line with --transcripts.
    #[arg(long)]
    captions: Option<PathBuf>,
    #[arg(long)]
    transcripts: Option<PathBuf>,
    /// Captions of an audio-centric corpus.
    #[arg(long)]
    audio_captions: Option<PathBuf>,
    /// Captions of an image-centric corpus.
    #[arg(long)]
    image_captions: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    pub captions: Option<PathBuf>,
    pub transcripts: Option<PathBuf>,
    pub audio_captions: Option<PathBuf>,
    pub image_captions: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct ArsSummary {
    vocabulary: usize,
    audio_corpus: f64,
    image_corpus: f64,
    captions: Option<f64>,
}

#[derive(Serialize)]
struct Summary {
    stopwords: &'static str,
    scr: Option<f64>,
    ars: Option<ArsSummary>,
}

fn read_normalized(path: &Path) -> CliResult<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).at(path)?;
    Ok(text.lines().map(normalize).collect())
}

pub fn run(args: AnalyzeArgs) -> CliResult<()> {
    let cfg: AnalyzeConfig = resolve(&args)?;
    let wants_scr = cfg.captions.is_some() || cfg.transcripts.is_some();
    let wants_ars = cfg.audio_captions.is_some() || cfg.image_captions.is_some();
    if !wants_scr && !wants_ars {
        return Err(CliError::usage("nothing to analyze: give --captions/--transcripts and/or --audio-captions/--image-captions"));
    }
    let dir = RunDir::create(&cfg.out, "analyze", &cfg)?;
    let captions = cfg.captions.as_deref().map(read_normalized).transpose()?;

    let scr_value = if wants_scr {
        let (Some(c), Some(t)) = (&captions, &cfg.transcripts) else {
            return Err(CliError::usage("SCR needs both --captions and --transcripts"));
        };
        let transcripts = read_normalized(t)?;
        Some(scr(c, &transcripts)?)
    } else {
        None
    };

    let ars = if wants_ars {
        let (Some(a), Some(i)) = (&cfg.audio_captions, &cfg.image_captions) else {
            return Err(CliError::usage("ARS needs both --audio-captions and --image-captions"));
        };
        let (audio, image) = (read_normalized(a)?, read_normalized(i)?);
        let (fa, fi) = (FreqTable::from_corpus(&audio), FreqTable::from_corpus(&image));
        let table = ArsTable::build(&fa, &fi);
        let mut csv = csv::Writer::from_writer(Vec::new());
        csv.write_record(["word", "ars", "audio_count", "image_count"])?;
        for (w, s) in table.ranked() {
            csv.write_record([w.to_string(), format!("{s:.12}"), fa.count(w).to_string(), fi.count(w).to_string()])?;
        }
        dir.write("ars_words.csv", &csv.into_inner().map_err(|e| CliError::data(e.to_string()))?)?;
        Some(ArsSummary {
            vocabulary: table.ranked().len(),
            audio_corpus: ars_corpus(&audio, &table).at(a)?,
            image_corpus: ars_corpus(&image, &table).at(i)?,
            captions: captions.as_ref().map(|c| ars_corpus(c, &table)).transpose()?,
        })
    } else {
        None
    };

    let summary = Summary { stopwords: stopwords_version(), scr: scr_value, ars };
    dir.json("analysis.json", &summary)?;
    if let Some(s) = summary.scr {
        println!("SCR {s:.2}%");
    }
    if let Some(a) = &summary.ars {
        println!("ARS audio corpus {:.4}, image corpus {:.4}", a.audio_corpus, a.image_corpus);
    }
    dir.finish()
}
