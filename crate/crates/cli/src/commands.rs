//! Command implementations and their output files.
//!
//! Every result file carries the resolved scenario: JSON documents embed it
//! under `"scenario"`, JSON-lines files start with a scenario line and CSV
//! files start with a `# scenario: {...}` comment. Wall-clock timings go to
//! separate files (`timings.jsonl`, `runtime.json`, `ablation_runtime.csv`)
//! so every other file is byte-identical across runs with the same seeds.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use aft_core::refmodel::write_model;
use aft_core::sim::{read_frame, write_frame, ObservedFrame};
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::experiments::{
    ablate, control_targets, run_control, sweep_occlusion, sweep_viewpoint, track_frames, Capture, ControlSummary,
    RuntimeSummary, SequenceRun, Setup, Stats, TrackSummary,
};
use crate::scenario::{ControlTask, Scenario};

/// Extension of exported frame files.
pub const FRAME_EXTENSION: &str = "aftf";

/// Output directory and the switches shared by every command.
#[derive(Clone, Debug)]
pub struct Context {
    pub scenario: Scenario,
    pub out: PathBuf,
    /// Fail with [`Error::TrackingLost`] when any frame lost tracking.
    pub strict: bool,
}

impl Context {
    fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.out.join(name)
    }

    fn create(&self, name: impl AsRef<Path>) -> Result<BufWriter<File>> {
        let path = self.path(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(BufWriter::new(file))
    }

    fn finish(&self, name: impl AsRef<Path>, mut w: BufWriter<File>) -> Result<()> {
        w.flush().map_err(|e| Error::io(&self.path(name), e))
    }

    /// Pretty JSON document `{"scenario": ..., <key>: value}`.
    fn write_json(&self, name: &str, key: &str, value: &impl Serialize) -> Result<()> {
        let mut w = self.create(name)?;
        let doc = json!({ "scenario": &self.scenario, key: value });
        serde_json::to_writer_pretty(&mut w, &doc)?;
        writeln!(w).map_err(|e| Error::io(&self.path(name), e))?;
        self.finish(name, w)
    }

    /// JSON lines headed by `{"scenario": ...}`.
    fn write_jsonl<T: Serialize>(&self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<()> {
        let mut w = self.create(name)?;
        let io = |e| Error::io(&self.path(name), e);
        serde_json::to_writer(&mut w, &json!({ "scenario": &self.scenario }))?;
        writeln!(w).map_err(io)?;
        for row in rows {
            serde_json::to_writer(&mut w, &row)?;
            writeln!(w).map_err(io)?;
        }
        self.finish(name, w)
    }

    /// CSV with a scenario comment line; `rows` are written as string records.
    fn write_csv(&self, name: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let name = name.as_ref();
        let mut w = self.create(name)?;
        self.scenario_comment(&mut w, name)?;
        {
            let mut csv = csv::Writer::from_writer(&mut w);
            csv.write_record(header)?;
            for row in rows {
                csv.write_record(row)?;
            }
            csv.flush().map_err(|e| Error::io(&self.path(name), e))?;
        }
        self.finish(name, w)
    }

    fn scenario_comment(&self, w: &mut impl Write, name: &Path) -> Result<()> {
        let line = serde_json::to_string(&self.scenario)?;
        writeln!(w, "# scenario: {line}").map_err(|e| Error::io(&self.path(name), e))
    }
}

fn num(x: f64) -> String {
    x.to_string()
}

fn stats_cells(s: &Stats) -> [String; 2] {
    [num(s.mean), num(s.std)]
}

fn percent(s: &Stats) -> String {
    format!("{:.2} ± {:.2} %", 100.0 * s.mean, 100.0 * s.std)
}

/// Builds the reference model and writes `model.aftm` plus `model.json`.
pub fn build_reference(ctx: &Context) -> Result<Setup> {
    let setup = Setup::new(ctx.scenario.clone())?;
    let mut w = ctx.create("model.aftm")?;
    write_model(&mut w, &setup.model)?;
    ctx.finish("model.aftm", w)?;
    let model = &setup.model;
    let info = json!({
        "file": "model.aftm",
        "n_points": model.points.len(),
        "n_partitions": model.n_partitions(),
        "nominal_lengths": model.nominal_lengths(),
        "descriptor_dims": model.descriptor_dims(),
        "partition_sizes": (0..model.n_partitions()).map(|j| model.partition_members(j).len()).collect::<Vec<_>>(),
    });
    ctx.write_json("model.json", "model", &info)?;
    println!("reference model: {} points in {} partitions", model.points.len(), model.n_partitions());
    Ok(setup)
}

fn tracking_outputs(ctx: &Context, runs: &[SequenceRun]) -> Result<TrackSummary> {
    ctx.write_jsonl("frames.jsonl", runs.iter().flat_map(|r| &r.records))?;
    let summary = TrackSummary::of(runs);
    ctx.write_json("summary.json", "summary", &summary)?;
    ctx.write_jsonl(
        "timings.jsonl",
        runs.iter().flat_map(|r| {
            r.records.iter().zip(&r.timings).map(|(rec, t)| json!({"sequence": rec.sequence, "frame": rec.frame, "timings": t}))
        }),
    )?;
    let runtime = RuntimeSummary::of(runs);
    ctx.write_json("runtime.json", "runtime", &runtime)?;
    if runs.iter().any(|r| !r.matchings.is_empty()) {
        let name = "matches.csv";
        let mut w = ctx.create(name)?;
        ctx.scenario_comment(&mut w, Path::new(name))?;
        // Frame ids count frames across all sequences in output order.
        let mut frame_id = 0u64;
        for r in runs {
            for m in &r.matchings {
                m.write_csv(&mut w, frame_id, frame_id == 0)?;
                frame_id += 1;
            }
        }
        ctx.finish(name, w)?;
    }
    for r in runs {
        for (rec, scores) in r.records.iter().zip(&r.scores) {
            let name = format!("scores/seq{:04}/frame{:04}.f32", rec.sequence, rec.frame);
            let mut w = ctx.create(&name)?;
            scores.write_dump(&mut w)?;
            ctx.finish(&name, w)?;
        }
    }

    println!("sequences: {}  frames: {}", summary.n_sequences, summary.n_frames);
    if summary.tip_error.n > 0 {
        println!("tip error:   {}", percent(&summary.tip_error));
        println!("shape error: {}", percent(&summary.shape_error));
    }
    println!(
        "runtime:     {:.1} ± {:.1} ms/frame",
        1e3 * runtime.per_frame.mean,
        1e3 * runtime.per_frame.std
    );
    if summary.lost_frames > 0 {
        eprintln!("tracking lost in {} frame(s)", summary.lost_frames);
        if ctx.strict {
            return Err(Error::TrackingLost { frames: summary.lost_frames });
        }
    }
    Ok(summary)
}

/// Renders `trajectory.n_sequences` sequences, tracks them and writes
/// `frames.jsonl`, `summary.json` and the timing files.
pub fn track(ctx: &Context, capture: Capture) -> Result<TrackSummary> {
    let setup = Setup::new(ctx.scenario.clone())?;
    let s = &setup.scenario;
    let camera = setup.camera(&s.camera.viewpoint)?;
    if s.export_frames {
        for seq in 0..s.trajectory.n_sequences {
            for (f, frame) in setup.render_sequence(seq, &camera, &s.occlusion)?.iter().enumerate() {
                let name = format!("frames/seq{seq:04}/frame{f:04}.{FRAME_EXTENSION}");
                let mut w = ctx.create(&name)?;
                write_frame(&mut w, frame)?;
                ctx.finish(&name, w)?;
            }
        }
    }
    let runs = setup.run_sequences(0..s.trajectory.n_sequences, &camera, &s.occlusion, &s.pipeline, capture)?;
    tracking_outputs(ctx, &runs)
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == FRAME_EXTENSION))
        .collect();
    files.sort();
    Ok(files)
}

/// Sequences below `dir`: every subdirectory holding frame files, or `dir`
/// itself when it holds frame files directly.
pub fn load_recorded(dir: &Path) -> Result<Vec<Vec<ObservedFrame>>> {
    let read = |files: Vec<PathBuf>| {
        files
            .iter()
            .map(|p| {
                let file = File::open(p).map_err(|e| Error::io(p, e))?;
                Ok(read_frame(&mut BufReader::new(file))?)
            })
            .collect::<Result<Vec<_>>>()
    };
    let direct = frame_files(dir)?;
    if !direct.is_empty() {
        return Ok(vec![read(direct)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let mut sequences = Vec::new();
    for sub in subdirs {
        let files = frame_files(&sub)?;
        if !files.is_empty() {
            sequences.push(read(files)?);
        }
    }
    if sequences.is_empty() {
        return Err(Error::Scenario(format!("no .{FRAME_EXTENSION} frames below {}", dir.display())));
    }
    Ok(sequences)
}

/// Tracks recorded frames (as written by `track` with `export_frames`).
pub fn replay(ctx: &Context, frames: &Path, capture: Capture) -> Result<TrackSummary> {
    use rayon::prelude::*;
    let sequences = load_recorded(frames)?;
    let setup = Setup::new(ctx.scenario.clone())?;
    let s = &setup.scenario;
    let camera = setup.camera(&s.camera.viewpoint)?;
    let runs = sequences
        .par_iter()
        .enumerate()
        .map(|(i, frames)| track_frames(&setup.model, frames, &camera, &s.pipeline, i, capture))
        .collect::<Result<Vec<_>>>()?;
    tracking_outputs(ctx, &runs)
}

/// Writes `occlusion.csv` with one row per (position, width) cell.
pub fn cmd_sweep_occlusion(ctx: &Context) -> Result<()> {
    let setup = Setup::new(ctx.scenario.clone())?;
    let cells = sweep_occlusion(&setup)?;
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            let mut row = vec![num(c.position), num(c.width)];
            row.extend(stats_cells(&c.tip_error));
            row.extend(stats_cells(&c.shape_error));
            row.extend([c.tip_error.n.to_string(), c.lost_frames.to_string()]);
            row
        })
        .collect();
    ctx.write_csv(
        "occlusion.csv",
        &["position", "width", "tip_error_mean", "tip_error_std", "shape_error_mean", "shape_error_std", "n_frames", "lost_frames"],
        &rows,
    )?;
    println!("{:>8} {:>6}  tip error", "position", "width");
    for c in &cells {
        println!("{:>8.2} {:>6.2}  {}", c.position, c.width, percent(&c.tip_error));
    }
    Ok(())
}

/// Writes `viewpoint.csv` (per view plus overall) and `viewpoint_pairs.csv`.
pub fn cmd_sweep_viewpoint(ctx: &Context) -> Result<()> {
    let setup = Setup::new(ctx.scenario.clone())?;
    let sweep = sweep_viewpoint(&setup)?;
    let rows: Vec<Vec<String>> = sweep
        .rows
        .iter()
        .chain(std::iter::once(&sweep.overall))
        .map(|r| {
            let mut row = vec![r.viewpoint.clone()];
            row.extend(stats_cells(&r.tip_error));
            row.extend(stats_cells(&r.shape_error));
            row
        })
        .collect();
    ctx.write_csv(
        "viewpoint.csv",
        &["viewpoint", "tip_error_mean", "tip_error_std", "shape_error_mean", "shape_error_std"],
        &rows,
    )?;
    let pairs: Vec<Vec<String>> = sweep
        .pairs
        .iter()
        .map(|p| {
            let mut row = vec![p.a.clone(), p.b.clone()];
            row.extend(stats_cells(&p.tip_distance));
            row.extend(stats_cells(&p.final_tip_distance));
            row.push(num(p.final_max));
            row
        })
        .collect();
    ctx.write_csv(
        "viewpoint_pairs.csv",
        &["a", "b", "tip_distance_mean", "tip_distance_std", "final_distance_mean", "final_distance_std", "final_distance_max"],
        &pairs,
    )?;
    for r in sweep.rows.iter().chain(std::iter::once(&sweep.overall)) {
        println!("{:<12} {}", r.viewpoint, percent(&r.tip_error));
    }
    Ok(())
}

/// Writes `ablation.csv` and the runtime sidecar `ablation_runtime.csv`.
pub fn cmd_ablate(ctx: &Context) -> Result<()> {
    let setup = Setup::new(ctx.scenario.clone())?;
    let table = ablate(&setup)?;
    let rows: Vec<Vec<String>> = table
        .iter()
        .map(|r| {
            let mut row = vec![
                r.configuration.clone(),
                r.flags.geometry_only.to_string(),
                r.flags.no_descriptor_update.to_string(),
                r.flags.direct_ik.to_string(),
            ];
            row.extend(stats_cells(&r.tip_error));
            row.extend(stats_cells(&r.shape_error));
            row.push(r.lost_frames.to_string());
            row
        })
        .collect();
    ctx.write_csv(
        "ablation.csv",
        &[
            "configuration",
            "geometry_only",
            "no_descriptor_update",
            "direct_ik",
            "tip_error_mean",
            "tip_error_std",
            "shape_error_mean",
            "shape_error_std",
            "lost_frames",
        ],
        &rows,
    )?;
    let runtime: Vec<Vec<String>> = table
        .iter()
        .map(|r| {
            let mut row = vec![r.configuration.clone()];
            row.extend(stats_cells(&r.runtime));
            row
        })
        .collect();
    ctx.write_csv("ablation_runtime.csv", &["configuration", "seconds_per_frame_mean", "seconds_per_frame_std"], &runtime)?;
    println!("{:<20} {:>18} {:>18} {:>12}", "configuration", "tip error", "shape error", "ms/frame");
    for r in &table {
        println!(
            "{:<20} {:>18} {:>18} {:>12.1}",
            r.configuration,
            percent(&r.tip_error),
            percent(&r.shape_error),
            1e3 * r.runtime.mean
        );
    }
    Ok(())
}

/// Closed-loop runs: `control.csv` with one row per target, `control.json`
/// with the aggregate, and one trace per target under `traces/`.
pub fn cmd_control(ctx: &Context, task: Option<ControlTask>) -> Result<Vec<ControlSummary>> {
    let setup = Setup::new(ctx.scenario.clone())?;
    let task = task.unwrap_or(setup.scenario.control.task);
    let targets = control_targets(&setup.scenario, task)?;
    let runs = run_control(&setup, &targets)?;
    for (i, run) in runs.iter().enumerate() {
        let name = format!("traces/target{i:03}.csv");
        let mut w = ctx.create(&name)?;
        ctx.scenario_comment(&mut w, Path::new(&name))?;
        run.trace.write_csv(&mut w)?;
        ctx.finish(&name, w)?;
    }
    let summaries: Vec<ControlSummary> = runs.into_iter().map(|r| r.summary).collect();
    let rows: Vec<Vec<String>> = summaries
        .iter()
        .enumerate()
        .map(|(i, s)| {
            vec![
                i.to_string(),
                serde_json::to_string(&s.target).unwrap_or_default(),
                num(s.steady_shape_error),
                num(s.steady_tip_error),
                s.saturated_steps.to_string(),
                s.lost_steps.to_string(),
            ]
        })
        .collect();
    ctx.write_csv(
        "control.csv",
        &["target_index", "target", "steady_shape_error", "steady_tip_error", "saturated_steps", "lost_steps"],
        &rows,
    )?;
    let shape = Stats::of(summaries.iter().map(|s| s.steady_shape_error));
    let tip = Stats::of(summaries.iter().map(|s| s.steady_tip_error));
    let max = |f: fn(&ControlSummary) -> f64| summaries.iter().map(f).fold(0.0, f64::max);
    let report = json!({
        "task": task,
        "n_targets": summaries.len(),
        "steady_shape_error": shape,
        "steady_tip_error": tip,
        "max_steady_shape_error": max(|s| s.steady_shape_error),
        "max_steady_tip_error": max(|s| s.steady_tip_error),
        "lost_steps": summaries.iter().map(|s| s.lost_steps).sum::<usize>(),
    });
    ctx.write_json("control.json", "report", &report)?;
    println!("targets: {}", summaries.len());
    println!("steady-state shape error: {} (max {:.2} %)", percent(&shape), 100.0 * max(|s| s.steady_shape_error));
    println!("steady-state tip error:   {} (max {:.2} %)", percent(&tip), 100.0 * max(|s| s.steady_tip_error));
    let lost: usize = summaries.iter().map(|s| s.lost_steps).sum();
    if lost > 0 && ctx.strict {
        return Err(Error::TrackingLost { frames: lost });
    }
    Ok(summaries)
}
