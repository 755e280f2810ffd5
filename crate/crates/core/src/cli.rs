//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::PipelineConfig;
use crate::gateway::{BackendEndpoint, Gateway, StubBackend};
use crate::pipeline::{
    apply_interventions, exit, format_captions, parse_captions, Pipeline, PipelineError, CAPTIONS_FILE,
};
use crate::prompt::{parse_edits, Intervention, Lexicon};
use crate::vocab::ClassVocabulary;

#[derive(Debug, Parser)]
#[command(
    name = "synthcomp",
    version,
    about = "Synthetic detection datasets from generated foregrounds and backgrounds"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Key = value config file; defaults apply for absent keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides master_seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads and concurrent backend requests.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Use the built-in procedural backend.
    #[arg(long, global = true)]
    pub stub: bool,
    #[arg(long, global = true, env = "SYNTHCOMP_BACKEND_URL")]
    pub backend_url: Option<String>,
    /// Class list, one `label[<TAB>synonym,...]` per line; VOC when absent.
    #[arg(long, global = true)]
    pub vocab: Option<PathBuf>,
    /// Directory with nouns.txt, class_synonyms.tsv and relations.tsv.
    #[arg(long, global = true)]
    pub lexicon_dir: Option<PathBuf>,
    /// Output root.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Caption the context description images.
    CaptionCdis {
        #[arg(long)]
        cdi_dir: PathBuf,
    },
    /// Generate and filter context backgrounds.
    GenBackgrounds {
        /// Use the zero-shot prompts instead of CDI captions.
        #[arg(long)]
        zero_shot: bool,
        /// Captions file; defaults to the one in the output root.
        #[arg(long)]
        captions: Option<PathBuf>,
        /// Edits applied to every caption first.
        #[arg(long)]
        edits: Option<PathBuf>,
    },
    /// Generate foreground objects and extract cutouts.
    GenForegrounds,
    /// Paste foregrounds onto backgrounds and write the dataset.
    Compose,
    /// Check a written dataset.
    Validate {
        /// Dataset root; defaults to the output root.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Rewrite a captions file with a list of edits.
    Intervene {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        edits: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Every stage in order.
    RunAll {
        #[arg(long, conflicts_with = "zero_shot", required_unless_present = "zero_shot")]
        cdi_dir: Option<PathBuf>,
        #[arg(long)]
        zero_shot: bool,
        #[arg(long)]
        edits: Option<PathBuf>,
    },
}

fn read(stage: &str, path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| PipelineError::input(stage, format!("{}: {e}", path.display())))
}

fn load_edits(stage: &str, path: Option<&Path>) -> Result<Vec<Intervention>, PipelineError> {
    match path {
        None => Ok(Vec::new()),
        Some(p) => {
            parse_edits(&read(stage, p)?).map_err(|e| PipelineError::input(stage, format!("{}: {e}", p.display())))
        }
    }
}

struct Context {
    global: Global,
    workers: usize,
}

impl Context {
    fn config(&self) -> Result<PipelineConfig, PipelineError> {
        let mut config = match &self.global.config {
            Some(p) => {
                PipelineConfig::load(p).map_err(|e| PipelineError::input("config", format!("{}: {e}", p.display())))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.global.seed {
            config.master_seed = seed;
        }
        Ok(config)
    }

    fn vocab(&self) -> Result<ClassVocabulary, PipelineError> {
        match &self.global.vocab {
            Some(p) => {
                ClassVocabulary::load(p).map_err(|e| PipelineError::input("vocab", format!("{}: {e}", p.display())))
            }
            None => Ok(ClassVocabulary::voc()),
        }
    }

    fn lexicon(&self) -> Result<Lexicon, PipelineError> {
        match &self.global.lexicon_dir {
            Some(d) => {
                Lexicon::load_dir(d).map_err(|e| PipelineError::input("lexicon", format!("{}: {e}", d.display())))
            }
            None => Ok(Lexicon::bundled()),
        }
    }

    fn pipeline(&self) -> Result<Pipeline, PipelineError> {
        Pipeline::new(
            self.config()?,
            self.vocab()?,
            self.lexicon()?,
            &self.global.out,
            self.workers,
        )
    }

    fn gateway(&self, config: &PipelineConfig) -> Result<Gateway, PipelineError> {
        if self.global.stub {
            return Ok(Gateway::stub(
                StubBackend::new(config.fg_templates.clone()),
                config.image_size,
                self.workers,
            ));
        }
        let url = self.global.backend_url.clone().ok_or_else(|| {
            PipelineError::input(
                "backend",
                "no backend: pass --stub, --backend-url or set SYNTHCOMP_BACKEND_URL",
            )
        })?;
        let endpoint = BackendEndpoint {
            max_in_flight: self.workers,
            ..BackendEndpoint::new(url)
        };
        Gateway::http(endpoint, config.image_size).map_err(|e| PipelineError::backend("backend", e))
    }
}

/// Run a parsed command; returns the process exit status.
pub fn run(cli: Cli) -> u8 {
    let workers = cli
        .global
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let ctx = Context {
        global: cli.global,
        workers,
    };
    match execute(&ctx, cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(ctx: &Context, command: Command) -> Result<u8, PipelineError> {
    match command {
        Command::Intervene {
            captions,
            edits,
            output,
        } => {
            let caps = parse_captions(&read("intervene", &captions)?);
            let edits = load_edits("intervene", Some(&edits))?;
            let (after, log) = apply_interventions(&caps, &edits);
            let write = |p: &Path, text: String| {
                std::fs::write(p, text).map_err(|e| PipelineError::input("intervene", format!("{}: {e}", p.display())))
            };
            write(&output, format_captions(&after))?;
            let log_path = output.with_extension("log");
            let changed = caps.iter().zip(&after).filter(|(a, b)| a.text != b.text).count();
            write(&log_path, log.join("\n") + if log.is_empty() { "" } else { "\n" })?;
            info!("{changed} of {} captions changed by {} edits", caps.len(), edits.len());
            println!("{changed} of {} captions changed", caps.len());
            Ok(exit::OK)
        }
        Command::Validate { dataset } => {
            let root = dataset.unwrap_or_else(|| ctx.global.out.clone());
            let report = if root == ctx.global.out {
                ctx.pipeline()?.validate()?
            } else {
                crate::dataset::validate_dataset(&root).map_err(|e| PipelineError::input("validate", e))?
            };
            Ok(print_report(&report))
        }
        Command::CaptionCdis { cdi_dir } => {
            let mut p = ctx.pipeline()?;
            let gw = ctx.gateway(&p.config)?;
            let caps = p.caption_cdis(&gw, &cdi_dir)?;
            println!(
                "{} captions written to {}",
                caps.len(),
                p.out.join(CAPTIONS_FILE).display()
            );
            Ok(exit::OK)
        }
        Command::GenBackgrounds {
            zero_shot,
            captions,
            edits,
        } => {
            let mut p = ctx.pipeline()?;
            let gw = ctx.gateway(&p.config)?;
            let caps = if zero_shot {
                None
            } else {
                let path = captions.unwrap_or_else(|| p.out.join(CAPTIONS_FILE));
                let caps = parse_captions(&read("backgrounds", &path)?);
                let edits = load_edits("backgrounds", edits.as_deref())?;
                Some(apply_interventions(&caps, &edits).0)
            };
            let assets = p.gen_backgrounds(&gw, caps.as_deref())?;
            println!("{} backgrounds stored", assets.len());
            Ok(exit::OK)
        }
        Command::GenForegrounds => {
            let mut p = ctx.pipeline()?;
            let gw = ctx.gateway(&p.config)?;
            let store = p.gen_foregrounds(&gw)?;
            println!("{} foreground assets stored", store.len());
            Ok(exit::OK)
        }
        Command::Compose => {
            let mut p = ctx.pipeline()?;
            p.compose()?;
            println!("dataset written to {}", p.out.display());
            Ok(exit::OK)
        }
        Command::RunAll {
            cdi_dir,
            zero_shot,
            edits,
        } => {
            let mut p = ctx.pipeline()?;
            let gw = ctx.gateway(&p.config)?;
            let edits = load_edits("run_all", edits.as_deref())?;
            let cdi = if zero_shot { None } else { cdi_dir.as_deref() };
            let report = p.run_all(&gw, cdi, &edits)?;
            if let Some(bg) = p.manifest.stage("backgrounds") {
                println!(
                    "backgrounds: {} kept of {} generated",
                    bg.counts["kept"], bg.counts["generated"]
                );
            }
            Ok(print_report(&report))
        }
    }
}

fn print_report(report: &crate::dataset::ValidationReport) -> u8 {
    println!(
        "{} images, {} annotations, {} violations",
        report.images,
        report.annotations,
        report.violations.len()
    );
    for v in report.violations.iter().take(20) {
        println!(
            "  {:?} image={:?} annotation={:?}: {}",
            v.kind, v.image_id, v.annotation_id, v.message
        );
    }
    if report.is_clean() {
        exit::OK
    } else {
        exit::DIRTY
    }
}
