//! Sweep harness: component toggles, decoder-depth sweep, dense-loss weight
//! grid, encoder connection modes, and one-vs-two-stage training, each run
//! over several seeds with a shared data/split/initialization pipeline so
//! per-seed comparisons are paired.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::metrics::{evaluate, MetricsReport, RunMeta};
use crate::model::{ConnectionMode, SegModel};
use crate::synthdata::{generate_dataset, slice_volume, SliceSample};
use crate::train::{
    finetune, pretrain, select_labeled_volumes, split_volumes, transfer, FinetuneResult,
    PretrainResult, StageMode,
};
use crate::util::{csv_row, derive_seed};

/// How the fine-tuned model is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// No pre-training.
    Scratch,
    /// Pre-train, then transfer encoder + partial decoder.
    Pretrained,
}

/// Everything one pipeline run produces.
pub struct SingleRun {
    pub report: MetricsReport,
    pub best_dsc: f64,
    pub pretrain: Option<PretrainResult>,
    pub finetune: FinetuneResult,
}

/// Materialized data for one seed: slices for pre-training (all training
/// volumes), the labeled subset, and the holdout split.
pub struct SeedData {
    pub train_slices: Vec<SliceSample>,
    pub labeled_slices: Vec<SliceSample>,
    pub holdout_slices: Vec<SliceSample>,
}

pub fn materialize(exp: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let volumes = generate_dataset(derive_seed(seed, "data"), &exp.data.synth(), exp.data.volumes)?;
    Ok(materialize_from(exp, &volumes, seed))
}

/// Split preloaded volumes into the pre-training pool, the labeled subset,
/// and the holdout, all at volume granularity and seeded.
pub fn materialize_from(exp: &ExperimentConfig, volumes: &[crate::synthdata::Volume], seed: u64) -> SeedData {
    let (train_idx, holdout_idx) = split_volumes(volumes, exp.data.train_fraction, seed);
    let train_volumes: Vec<_> = train_idx.iter().map(|&i| &volumes[i]).collect();
    let train_ids: Vec<_> = train_volumes.iter().map(|v| v.volume_id).collect();
    let labeled_ids = select_labeled_volumes(&train_ids, exp.finetune.label_fraction, seed);
    let mut train_slices = Vec::new();
    let mut labeled_slices = Vec::new();
    for v in &train_volumes {
        let slices = slice_volume(v);
        if labeled_ids.contains(&v.volume_id) {
            labeled_slices.extend(slices.iter().cloned());
        }
        train_slices.extend(slices);
    }
    let holdout_slices: Vec<SliceSample> = holdout_idx
        .iter()
        .flat_map(|&i| slice_volume(&volumes[i]))
        .collect();
    SeedData {
        train_slices,
        labeled_slices,
        holdout_slices,
    }
}

/// Run the full pipeline for one (config, seed, init) cell. Scratch and
/// pretrained runs share the segmentation init seed, the data, the splits,
/// and the fine-tuning schedule, so only the initialization differs.
pub fn run_single(exp: &ExperimentConfig, seed: u64, init: InitMode) -> Result<SingleRun> {
    exp.validate()?;
    let data = materialize(exp, seed)?;
    let seg_seed = derive_seed(seed, "seg/init");
    let (pre, seg) = match init {
        InitMode::Scratch => (
            None,
            SegModel::<f32>::init(&exp.model, exp.data.classes, seg_seed)?,
        ),
        InitMode::Pretrained => {
            let pre = pretrain(
                &exp.model,
                &exp.augment.fix,
                &exp.augment.var,
                &exp.pretrain,
                &data.train_slices,
                seed,
            )?;
            let ckpt = Checkpoint::from_macl(
                &pre.model,
                exp.to_value(),
                Some(pre.final_loss_scalars()),
                RngState {
                    seed,
                    steps: pre.total_steps as u64,
                },
            );
            let outcome = transfer(&ckpt, &exp.model, exp.data.classes, seg_seed)?;
            (Some(pre), outcome.model)
        }
    };
    let ft = finetune(
        seg,
        &data.labeled_slices,
        &data.holdout_slices,
        &exp.finetune,
        seed,
    )?;
    let report = evaluate(
        &ft.model,
        &data.holdout_slices,
        exp.data.classes,
        RunMeta {
            config_hash: exp.content_hash(),
            seed,
            checkpoint_id: String::new(),
        },
    )?;
    Ok(SingleRun {
        best_dsc: ft.best_dsc,
        report,
        pretrain: pre,
        finetune: ft,
    })
}

// ---------------------------------------------------------------------------
// Sweep cells
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Cell {
    pub name: String,
    pub exp: ExperimentConfig,
    pub init: InitMode,
}

/// Expand the configured sweep families into concrete cells.
pub fn build_cells(base: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    let mut push = |name: &str, exp: ExperimentConfig, init: InitMode| {
        cells.push(Cell {
            name: name.to_string(),
            exp,
            init,
        });
    };

    push("scratch", base.clone(), InitMode::Scratch);
    push("full", base.clone(), InitMode::Pretrained);

    if base.ablation.components {
        // Global loss only, no decoder: the position-based baseline.
        let mut global_only = base.clone();
        global_only.model.decoder_blocks = 0;
        global_only.pretrain.lambda = None;
        global_only.pretrain.weights.lambda2 = 0.0;
        global_only.pretrain.weights.lambda3 = 0.0;
        push("global_only", global_only, InitMode::Pretrained);

        // Decoder present in the graph, still global loss only.
        let mut with_decoder = base.clone();
        with_decoder.pretrain.weights.lambda2 = 0.0;
        with_decoder.pretrain.weights.lambda3 = 0.0;
        push("global_decoder", with_decoder, InitMode::Pretrained);

        // Add feature-level consistency; dense loss still off.
        let mut image_level = base.clone();
        image_level.pretrain.weights.lambda2 = 0.0;
        push("image_level", image_level, InitMode::Pretrained);
        // The fourth toggle (dense loss on) is the `full` cell.
    }

    for &blocks in &base.ablation.blocks {
        if blocks == base.model.decoder_blocks {
            continue; // identical to `full`
        }
        let mut exp = base.clone();
        exp.model.decoder_blocks = blocks;
        exp.pretrain.lambda = None;
        if exp.validate().is_err() {
            continue; // e.g. resolution cannot support this depth
        }
        push(&format!("blocks{blocks}"), exp, InitMode::Pretrained);
    }

    for &l2 in &base.ablation.lambda2_grid {
        if (l2 - base.pretrain.weights.lambda2).abs() < 1e-12 {
            continue;
        }
        let mut exp = base.clone();
        exp.pretrain.weights.lambda2 = l2;
        push(&format!("lambda2_{l2}"), exp, InitMode::Pretrained);
    }

    if base.ablation.connection_modes {
        let mut independent = base.clone();
        independent.pretrain.connection = ConnectionMode::Independent;
        push("conn_independent", independent, InitMode::Pretrained);
        let mut ema = base.clone();
        ema.pretrain.connection = ConnectionMode::Ema { momentum: 0.99 };
        push("conn_ema", ema, InitMode::Pretrained);
    }

    if base.ablation.stages {
        let mut two = base.clone();
        two.pretrain.stages = StageMode::Two;
        push("two_stage", two, InitMode::Pretrained);
    }

    cells
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRow {
    pub cell: String,
    pub seed: u64,
    pub dsc: f64,
    pub jc: f64,
    pub hd95: f64,
    pub asd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub n: usize,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub jc_mean: f64,
    pub hd95_mean: f64,
    pub asd_mean: f64,
}

pub struct AblationOutcome {
    pub rows: Vec<RunRow>,
    pub summary: Vec<CellSummary>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn summarize(rows: &[RunRow], cells: &[Cell]) -> Vec<CellSummary> {
    cells
        .iter()
        .map(|cell| {
            let mine: Vec<&RunRow> = rows.iter().filter(|r| r.cell == cell.name).collect();
            let pick = |f: fn(&RunRow) -> f64| mine.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (dsc_mean, dsc_std) = mean_std(&pick(|r| r.dsc));
            CellSummary {
                cell: cell.name.clone(),
                n: mine.len(),
                dsc_mean,
                dsc_std,
                jc_mean: mean_std(&pick(|r| r.jc)).0,
                hd95_mean: mean_std(&pick(|r| r.hd95)).0,
                asd_mean: mean_std(&pick(|r| r.asd)).0,
            }
        })
        .collect()
}

pub fn rows_csv(rows: &[RunRow]) -> String {
    let mut out = String::from("cell,seed,dsc,jc,hd95,asd\n");
    for r in rows {
        out.push_str(&csv_row(&[
            r.cell.clone(),
            r.seed.to_string(),
            r.dsc.to_string(),
            r.jc.to_string(),
            r.hd95.to_string(),
            r.asd.to_string(),
        ]));
    }
    out
}

pub fn summary_csv(summary: &[CellSummary]) -> String {
    let mut out = String::from("cell,n,dsc_mean,dsc_std,jc_mean,hd95_mean,asd_mean\n");
    for s in summary {
        out.push_str(&csv_row(&[
            s.cell.clone(),
            s.n.to_string(),
            s.dsc_mean.to_string(),
            s.dsc_std.to_string(),
            s.jc_mean.to_string(),
            s.hd95_mean.to_string(),
            s.asd_mean.to_string(),
        ]));
    }
    out
}

/// Fixed-width rendering of the summary, one row per cell.
pub fn summary_table(summary: &[CellSummary]) -> String {
    let mut out = format!(
        "{:<18} {:>3} {:>12} {:>8} {:>8} {:>8}\n",
        "cell", "n", "DSC(mean+-sd)", "JC", "HD95", "ASD"
    );
    for s in summary {
        out.push_str(&format!(
            "{:<18} {:>3} {:>6.4}+-{:<5.4} {:>8.4} {:>8.4} {:>8.4}\n",
            s.cell, s.n, s.dsc_mean, s.dsc_std, s.jc_mean, s.hd95_mean, s.asd_mean
        ));
    }
    out
}

/// Run every (cell, seed) combination. With `parallel` true, cells run on
/// worker threads; each run is internally single-threaded and seeded, so the
/// output is identical either way and sorted deterministically.
pub fn run_ablation(base: &ExperimentConfig, out_dir: Option<&Path>) -> Result<AblationOutcome> {
    base.validate()?;
    if base.ablation.seeds.is_empty() {
        return crate::error::config_err("ablation needs at least one seed");
    }
    let cells = build_cells(base);
    let mut tasks: Vec<(usize, Cell, u64)> = Vec::new();
    let mut task_id = 0usize;
    for cell in &cells {
        for &seed in &base.ablation.seeds {
            tasks.push((task_id, cell.clone(), seed));
            task_id += 1;
        }
    }
    let workers = if base.ablation.parallel && !base.deterministic {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
            .min(tasks.len().max(1))
    } else {
        1
    };

    let mut results: Vec<Option<RunRow>> = vec![None; tasks.len()];
    if workers <= 1 {
        for (id, cell, seed) in &tasks {
            results[*id] = Some(run_cell_seed(cell, *seed)?);
        }
    } else {
        let queue = std::sync::Mutex::new(tasks.clone().into_iter().collect::<Vec<_>>());
        let collected = std::sync::Mutex::new(Vec::<(usize, Result<RunRow>)>::new());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let task = queue.lock().expect("queue lock").pop();
                    match task {
                        None => break,
                        Some((id, cell, seed)) => {
                            let row = run_cell_seed(&cell, seed);
                            collected.lock().expect("result lock").push((id, row));
                        }
                    }
                });
            }
        });
        for (id, row) in collected.into_inner().expect("collected") {
            results[id] = Some(row?);
        }
    }
    let rows: Vec<RunRow> = results.into_iter().map(|r| r.expect("task ran")).collect();
    let summary = summarize(&rows, &cells);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("runs.csv"), rows_csv(&rows))?;
        std::fs::write(dir.join("summary.csv"), summary_csv(&summary))?;
        std::fs::write(dir.join("summary.txt"), summary_table(&summary))?;
    }
    Ok(AblationOutcome { rows, summary })
}

fn run_cell_seed(cell: &Cell, seed: u64) -> Result<RunRow> {
    let run = run_single(&cell.exp, seed, cell.init)?;
    Ok(RunRow {
        cell: cell.name.clone(),
        seed,
        dsc: run.report.mean.dsc,
        jc: run.report.mean.jc,
        hd95: run.report.mean.hd95,
        asd: run.report.mean.asd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_cover_the_sweep_families() {
        let base = ExperimentConfig::desk();
        let cells = build_cells(&base);
        let names: Vec<&str> = cells.iter().map(|c| c.name.as_str()).collect();
        for expect in [
            "scratch",
            "full",
            "global_only",
            "global_decoder",
            "image_level",
            "blocks0",
            "blocks1",
            "blocks3",
            "lambda2_0.1",
            "lambda2_0.9",
            "conn_independent",
            "conn_ema",
            "two_stage",
        ] {
            assert!(names.contains(&expect), "missing cell {expect}: {names:?}");
        }
        // The duplicate of the base config is skipped in sweeps.
        assert!(!names.contains(&"blocks2"));
        assert!(!names.contains(&"lambda2_0.5"));
        // Every cell config validates.
        for c in &cells {
            c.exp.validate().unwrap();
        }
    }

    #[test]
    fn global_only_cell_is_position_baseline() {
        let base = ExperimentConfig::desk();
        let cells = build_cells(&base);
        let cell = cells.iter().find(|c| c.name == "global_only").unwrap();
        assert_eq!(cell.exp.model.decoder_blocks, 0);
        assert_eq!(cell.exp.pretrain.weights.lambda2, 0.0);
        assert_eq!(cell.exp.pretrain.weights.lambda3, 0.0);
    }
}
