//! Configuration-driven training and evaluation shared by the commands.

use jfe_core::encoder::Combiner;
use jfe_core::eval::evaluate;
use jfe_core::trainer::{run_stage1, run_stage2, Checkpoint, ModelConfig, Stage, TrainOutcome};

use crate::bench::DataDir;
use crate::config::RunConfig;
use crate::error::Result;
use crate::report::ReportDoc;

/// Fresh model for `data`, seeded by `run.seed`.
pub fn init_checkpoint(cfg: &RunConfig, data: &DataDir) -> Result<Checkpoint> {
    let patch_dim = patch_dim(data);
    let model = cfg.model_config(data.vocab.len(), patch_dim)?;
    let mut ckpt = Checkpoint::init(model, cfg.run.seed)?;
    if let ModelConfig::TwoTower(t) = model {
        if t.combiner == Combiner::ScoreFusion {
            let id = ckpt.store.id("combiner.w")?;
            ckpt.store.data_mut(id)[0] = f64::from(cfg.model.score_weight as f32);
        }
    }
    Ok(ckpt)
}

/// Patch width of the first image in the data, or of the generator.
pub fn patch_dim(data: &DataDir) -> usize {
    if let Some(w) = &data.world {
        return w.patch_dim();
    }
    let images = data
        .caption_pairs
        .iter()
        .map(|p| &p.image)
        .chain(
            data.train
                .iter()
                .flat_map(|e| e.query.image().into_iter().chain(e.candidate.image())),
        )
        .chain(data.eval.candidates.iter().filter_map(|c| c.item.image()));
    images.map(|g| g.patch_dim()).next().unwrap_or(1)
}

/// Runs one stage on the matching part of `data`.
pub fn run_stage(
    cfg: &RunConfig,
    base: &Checkpoint,
    stage: Stage,
    data: &DataDir,
) -> Result<TrainOutcome> {
    let sc = cfg.stage_config(stage)?;
    Ok(match stage {
        Stage::Adapt => run_stage1(base, &data.caption_pairs, &data.vocab, &sc)?,
        Stage::Instruct => run_stage2(base, &data.train, &data.vocab, &sc)?,
    })
}

/// Runs `stages` in order from `base`, handing each stage's log to
/// `on_log`.
pub fn train(
    cfg: &RunConfig,
    base: Checkpoint,
    stages: &[Stage],
    data: &DataDir,
    mut on_log: impl FnMut(Stage, &[jfe_core::trainer::StepLog]) -> Result<()>,
) -> Result<Checkpoint> {
    let mut ckpt = base;
    for &stage in stages {
        let out = run_stage(cfg, &ckpt, stage, data)?;
        on_log(stage, &out.log)?;
        ckpt = out.checkpoint;
    }
    Ok(ckpt)
}

/// Scores `ckpt` on the evaluation split with the `[eval]` settings.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    data: &DataDir,
) -> Result<ReportDoc> {
    let enc = ckpt.encoder()?;
    let report = evaluate(
        &enc,
        &ckpt.store,
        &data.eval,
        &data.vocab,
        cfg.eval_options()?,
    )?;
    Ok(ReportDoc::new(&report, ckpt, cfg.echo()))
}
