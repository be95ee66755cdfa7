//! End-to-end orchestration: configuration, the work directory, the
//! synthetic world and the commands that move artifacts between stages.

mod commands;
mod config;
mod heatmap;
mod synth;
mod workdir;

pub use commands::{
    ablation_sets, regressor_path, ABLATION_LABELS, EMBEDDINGS, EXTRACTOR_NORM, PCA, PRUNED, PRUNER, PRUNER_NORM,
    REPR, SELECTION, STUDENT, SYNTH_MARKER, TEACHER,
};
pub use config::{ExtractorMode, ExtractorSettings, Paths, PcaK, PipelineConfig, PrunerSettings, RegressSettings};
pub use heatmap::{heatmap_grid, HeatmapGrid, NO_DATA};
pub use synth::{
    read_truth_csv, render_tile, synth_world, write_truth_csv, write_world, SynthWorld, SynthWorldSpec, TileTruth,
    WorldPaths, URBAN_THRESHOLD,
};
pub use workdir::{read_lineage, sha256_hex, ArtifactEntry, Manifest, Workdir, LOCK, MANIFEST, SUBDIRS};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Command {
    Ingest,
    SelectTiles,
    TrainExtractor,
    TrainPruner,
    Embed,
    Prune,
    FitPca,
    Represent,
    TrainRegressor,
    Evaluate,
    Predict,
    Ablate,
    Heatmap,
    SynthWorld,
}

impl Command {
    pub const ALL: [Command; 14] = [
        Command::Ingest,
        Command::SelectTiles,
        Command::TrainExtractor,
        Command::TrainPruner,
        Command::Embed,
        Command::Prune,
        Command::FitPca,
        Command::Represent,
        Command::TrainRegressor,
        Command::Evaluate,
        Command::Predict,
        Command::Ablate,
        Command::Heatmap,
        Command::SynthWorld,
    ];

    /// Every stage from raw inputs to reports, in dependency order.
    pub const PIPELINE: [Command; 13] = [
        Command::Ingest,
        Command::SelectTiles,
        Command::TrainExtractor,
        Command::TrainPruner,
        Command::Embed,
        Command::Prune,
        Command::FitPca,
        Command::Represent,
        Command::TrainRegressor,
        Command::Predict,
        Command::Evaluate,
        Command::Ablate,
        Command::Heatmap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::SelectTiles => "select-tiles",
            Command::TrainExtractor => "train-extractor",
            Command::TrainPruner => "train-pruner",
            Command::Embed => "embed",
            Command::Prune => "prune",
            Command::FitPca => "fit-pca",
            Command::Represent => "represent",
            Command::TrainRegressor => "train-regressor",
            Command::Evaluate => "evaluate",
            Command::Predict => "predict",
            Command::Ablate => "ablate",
            Command::Heatmap => "heatmap",
            Command::SynthWorld => "synth-world",
        }
    }
}

impl std::fmt::Display for Command {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Command::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Command::ALL.iter().map(|c| c.name()).collect();
            Error::Config(format!("unknown command `{s}` (one of: {})", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub command: Command,
    pub lineage: String,
    /// Workdir-relative paths written by the command.
    pub outputs: Vec<String>,
}

/// Runs one command under the workdir lock. `variable` overrides
/// `regress.variable`.
pub fn run(cfg: &PipelineConfig, command: Command, variable: Option<&str>) -> Result<RunSummary> {
    let wd = Workdir::open(&cfg.workdir(), command.name())?;
    let mut ctx = commands::Ctx {
        cfg,
        wd,
        lineage: cfg.hash(),
        variable: variable.unwrap_or(&cfg.regress.variable).to_string(),
        outputs: Vec::new(),
    };
    log::info!("{command} (lineage {})", ctx.lineage);
    match command {
        Command::Ingest => commands::ingest(&mut ctx)?,
        Command::SelectTiles => commands::select(&mut ctx)?,
        Command::TrainExtractor => commands::train_extractor(&mut ctx)?,
        Command::TrainPruner => commands::train_pruner(&mut ctx)?,
        Command::Embed => commands::embed(&mut ctx)?,
        Command::Prune => commands::prune(&mut ctx)?,
        Command::FitPca => commands::fit_pca(&mut ctx)?,
        Command::Represent => commands::represent(&mut ctx)?,
        Command::TrainRegressor => commands::train_regressor(&mut ctx)?,
        Command::Evaluate => commands::evaluate_cmd(&mut ctx)?,
        Command::Predict => commands::predict(&mut ctx)?,
        Command::Ablate => commands::ablate(&mut ctx)?,
        Command::Heatmap => commands::heatmap(&mut ctx)?,
        Command::SynthWorld => commands::synth(&mut ctx)?,
    }
    Ok(RunSummary {
        command,
        lineage: ctx.lineage,
        outputs: ctx.outputs,
    })
}

/// Runs `commands` in order, stopping at the first failure.
pub fn run_all(cfg: &PipelineConfig, commands: &[Command], variable: Option<&str>) -> Result<Vec<RunSummary>> {
    commands.iter().map(|&c| run(cfg, c, variable)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_names_round_trip() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
        assert!(matches!("fly".parse::<Command>(), Err(Error::Config(_))));
    }
}
