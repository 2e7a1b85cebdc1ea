//! Parser training on a synthesized arm, evaluation on annotated
//! caricatures, and the four-arm comparison table.

use cariface_core::dataset::load_caricature_dataset;
use cariface_core::metrics::RenderedTable;
use cariface_core::{iou_report, render_table, ConfusionMatrix, Image, IoUReport, NUM_CLASSES};
use cariface_models::parsing::{predict, train_parser, ParsePair, ParseTrainLog, ParsingNetwork, OUTPUT_STRIDE};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{PipelineError, Result};
use crate::stages::{self, require};
use crate::synthesis::{self, synthesis_hash, Arm, SynthesisManifest};
use crate::workspace::{file_sha256, reset_dir, write_json, write_text, StageRecord, Workspace};

pub const TRAIN_PARSER: &str = "train-parser";
pub const EVALUATE: &str = "evaluate";

fn parser_dir(arm: Arm) -> String {
    format!("parser/{}", arm.name())
}

fn parser_model(arm: Arm) -> String {
    format!("parser/{}/model.safetensors", arm.name())
}

fn parser_hash(cfg: &PipelineConfig, arm: Arm) -> Result<String> {
    Ok(stages::stage_hash(serde_json::json!({
        "synthesis": synthesis_hash(cfg, arm)?, "parser": cfg.parser,
    })))
}

/// Trains a parser on the pairs listed in the arm's manifest.
pub fn train_parser_for(cfg: &PipelineConfig, ws: &Workspace, arm: Arm) -> Result<(ParsingNetwork, ParseTrainLog)> {
    require(ws, &arm.dir(), synthesis::SYNTHESIZE, &synthesis_hash(cfg, arm)?)?;
    let manifest = SynthesisManifest::load(ws, arm)?;
    let pairs: Vec<ParsePair> = manifest
        .pairs(ws)?
        .into_iter()
        .map(|(name, image, labels)| ParsePair { name, image, labels })
        .collect();
    log::info!(
        "train-parser: arm {arm}, {} pairs, {} iterations",
        pairs.len(),
        cfg.parser.max_iter
    );
    let (net, log) = train_parser(&pairs, &cfg.parser)?;

    let dir = parser_dir(arm);
    reset_dir(&ws.path(&dir))?;
    let model = parser_model(arm);
    net.save(&ws.path(&model))?;
    let log_file = format!("{dir}/train_log.csv");
    write_text(&ws.path(&log_file), &log.to_csv())?;
    let record = StageRecord {
        stage: TRAIN_PARSER.into(),
        config_hash: parser_hash(cfg, arm)?,
        inputs: ws.checksums(&[arm.manifest()])?,
        outputs: ws.checksums(&[model.clone(), format!("{model}.json"), log_file])?,
    };
    ws.write_record(&dir, &record)?;
    Ok((net, log))
}

/// Predicts labels for an image of any size, padding to the parser stride.
pub fn predict_any(net: &ParsingNetwork, img: &Image) -> Result<cariface_core::LabelMap> {
    let (h, w) = (img.height(), img.width());
    let up = |n: usize| n.max(cariface_core::raster::MIN_SIDE).div_ceil(OUTPUT_STRIDE) * OUTPUT_STRIDE;
    if up(h) == h && up(w) == w {
        return Ok(predict(net, img)?);
    }
    let padded = img.crop_padded(0, 0, up(h), up(w), [0.0; 3])?;
    Ok(predict(net, &padded)?.crop_padded(0, 0, h, w, 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub arm: Arm,
    pub images: usize,
    /// Checksums of the parser and of the manifest it was trained from.
    pub parser: String,
    pub manifest: String,
    pub iou: IoUReport,
}

/// Scores the arm's parser on the annotated evaluation caricatures and
/// writes `eval/<arm>/{predictions,report.json}`.
pub fn evaluate(cfg: &PipelineConfig, ws: &Workspace, arm: Arm) -> Result<EvaluationReport> {
    let record = require(ws, &parser_dir(arm), TRAIN_PARSER, &parser_hash(cfg, arm)?)?;
    // The parser must have been trained on the manifest that is on disk now.
    let manifest_rel = arm.manifest();
    let recorded = record.inputs.get(&manifest_rel).ok_or_else(|| {
        PipelineError::provenance(
            &ws.path(&parser_dir(arm)),
            format!("record does not list {manifest_rel}"),
        )
    })?;
    SynthesisManifest::load(ws, arm)?;
    ws.verify(&record.inputs, &ws.path(&format!("{}/stage.json", parser_dir(arm))))?;
    let model = parser_model(arm);
    let net = ParsingNetwork::load(&ws.path(&model))?;

    cfg.check_data_paths()?;
    let samples = load_caricature_dataset(&cfg.data.eval)?;
    if samples.is_empty() {
        return Err(PipelineError::config("evaluation set is empty"));
    }
    let dir = format!("eval/{}", arm.name());
    reset_dir(&ws.path(&format!("{dir}/predictions")))?;
    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    for s in &samples {
        let gt = s
            .labels
            .as_ref()
            .ok_or_else(|| PipelineError::config(format!("evaluation image {} has no label map", s.name)))?;
        let pred = predict_any(&net, &s.image)?;
        pred.save_png(&ws.path(&format!("{dir}/predictions/{}.png", s.name)))?;
        cm.accumulate(&pred, gt)?;
    }
    let report = EvaluationReport {
        arm,
        images: samples.len(),
        parser: file_sha256(&ws.path(&model))?,
        manifest: recorded.clone(),
        iou: iou_report(&cm)?,
    };
    write_json(&ws.path(&format!("{dir}/report.json")), &report)?;
    log::info!("evaluate: arm {arm}, mIoU {:.4}", report.iou.miou);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutcome {
    /// One report per arm, in table order.
    pub reports: Vec<EvaluationReport>,
    pub table: RenderedTable,
}

impl AblationOutcome {
    pub fn report(&self, arm: Arm) -> Option<&EvaluationReport> {
        self.reports.iter().find(|r| r.arm == arm)
    }
}

/// Renders `tables/ablation.{md,csv}` from per-arm reports.
pub fn write_table(ws: &Workspace, reports: &[EvaluationReport]) -> Result<RenderedTable> {
    let rows: Vec<(String, IoUReport)> = reports
        .iter()
        .map(|r| (r.arm.label().to_string(), r.iou.clone()))
        .collect();
    let table = render_table(&rows)?;
    write_text(&ws.path("tables/ablation.md"), &table.markdown)?;
    write_text(&ws.path("tables/ablation.csv"), &table.csv)?;
    Ok(table)
}

/// Runs every stage and all four arms, then writes the comparison table.
pub fn run_ablation(cfg: &PipelineConfig, ws: &Workspace) -> Result<AblationOutcome> {
    stages::prepare(cfg, ws)?;
    stages::train_shape(cfg, ws)?;
    stages::train_texture(cfg, ws)?;
    let mut reports = Vec::with_capacity(Arm::ALL.len());
    for arm in Arm::ALL {
        synthesis::synthesize(cfg, ws, arm)?;
        train_parser_for(cfg, ws, arm)?;
        reports.push(evaluate(cfg, ws, arm)?);
    }
    let table = write_table(ws, &reports)?;
    Ok(AblationOutcome { reports, table })
}
