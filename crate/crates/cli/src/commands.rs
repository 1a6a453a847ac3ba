use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use attnsync::alignment::{align_stream, write_aligned};
use attnsync::dataset::{load_dataset, save_dataset, split_dataset, unlabelled_windows, DatasetSplit, WindowSample};
use attnsync::evaluation::{
    emit_plot_csvs, subject_metrics, summarize, suppression_study, write_comparison_csv, write_predictions_csv,
    write_suppression_csv, SuppressionReport,
};
use attnsync::isc::{write_traces_csv, IscTrace};
use attnsync::landmark_io::{fill_gaps, read_stream_file, stream_file_name, validate_stream};
use attnsync::model::{predict, train_with_progress, ModelArtifact};
use attnsync::pipeline::{evaluate, labelled_windows, process_stream, run_experiment, Error, Evaluation, ExperimentConfig};
use attnsync::synth::SyntheticCohort;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::run::{digests, write_run, FileDigest};
use crate::{Command, ReportArgs, TrainArgs, WindowArgs};

fn apply_window(cfg: &mut PipelineConfig, w: &WindowArgs) {
    if let Some(v) = w.window {
        cfg.window.length_s = v;
    }
    if let Some(v) = w.step {
        cfg.window.step_s = v;
    }
    if let Some(v) = w.max_gap {
        cfg.stream.max_gap_s = v;
    }
}

fn apply_train(cfg: &mut PipelineConfig, t: &TrainArgs) {
    if let Some(a) = t.arch {
        cfg.architecture = a;
        cfg.model = None;
    }
    if let Some(v) = t.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = t.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = t.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = t.weight_decay {
        cfg.train.weight_decay = v;
    }
}

fn output_dir(flag: Option<PathBuf>, cfg: &mut PipelineConfig) -> Result<PathBuf, Error> {
    let dir = flag
        .or_else(|| cfg.paths.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --output or set paths.output_dir".into()))?;
    fs::create_dir_all(&dir)?;
    cfg.paths.output_dir = Some(dir.clone());
    Ok(dir)
}

fn input_dir(flag: Option<PathBuf>, cfg: &mut PipelineConfig) -> Result<PathBuf, Error> {
    let dir = flag
        .or_else(|| cfg.paths.input_dir.clone())
        .ok_or_else(|| Error::Config("no input directory: pass --input or set paths.input_dir".into()))?;
    cfg.paths.input_dir = Some(dir.clone());
    cfg.check_paths()?;
    Ok(dir)
}

/// `*.jsonl` frame streams in a directory, sorted by file name.
fn stream_files(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no .jsonl streams in {}", dir.display())));
    }
    Ok(files)
}

fn input_digests(paths: &[&Path]) -> Result<Vec<FileDigest>, Error> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(digests(p)?);
    }
    Ok(out)
}

fn config_inputs(cfg: &PipelineConfig) -> Vec<&Path> {
    let p = &cfg.paths;
    [&p.canonical_model, &p.blendshape_names, &p.group_map].into_iter().flatten().map(PathBuf::as_path).collect()
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, Error> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

fn finish(dir: &Path, command: &str, cfg: &PipelineConfig, inputs: &[FileDigest], outputs: &[PathBuf]) -> Result<(), Error> {
    let outputs = input_digests(&outputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    write_run(dir, command, cfg, inputs, &outputs)?;
    Ok(())
}

fn write_traces(dir: &Path, traces: &[IscTrace]) -> Result<Vec<PathBuf>, Error> {
    fs::create_dir_all(dir)?;
    let mut by_video: BTreeMap<&str, Vec<IscTrace>> = BTreeMap::new();
    for t in traces {
        by_video.entry(t.video_id.as_str()).or_default().push(t.clone());
    }
    let mut written = Vec::new();
    for (video, traces) in by_video {
        let path = dir.join(format!("traces_{video}.csv"));
        write_traces_csv(&traces, create(&path)?)?;
        written.push(path);
    }
    Ok(written)
}

fn pick_split(split: DatasetSplit, name: &str) -> Result<Vec<WindowSample>, Error> {
    match name {
        "train" => Ok(split.train),
        "val" => Ok(split.val),
        "test" => Ok(split.test),
        other => Err(Error::Config(format!("unknown split {other:?} (train, val, test)"))),
    }
}

fn log_epoch(e: &attnsync::model::EpochLoss) {
    log::info!("epoch {} train {:.6} val {:?}", e.epoch, e.train, e.val);
}

#[derive(Serialize)]
struct EvaluationJson<'a> {
    comparison: &'a attnsync::evaluation::ComparisonReport,
    model: attnsync::evaluation::MetricsSummary,
    baseline: attnsync::evaluation::MetricsSummary,
}

fn write_evaluation(dir: &Path, ev: &Evaluation, plots: Option<&Path>) -> Result<Vec<PathBuf>, Error> {
    let json = dir.join("evaluation.json");
    write_json(
        &json,
        &EvaluationJson {
            comparison: &ev.comparison,
            model: summarize(subject_metrics(&ev.model)?)?,
            baseline: summarize(subject_metrics(&ev.baseline)?)?,
        },
    )?;
    let csv = dir.join("comparison.csv");
    write_comparison_csv(create(&csv)?, &ev.comparison)?;
    let preds = dir.join("predictions.csv");
    write_predictions_csv(create(&preds)?, &ev.model)?;
    let mut out = vec![json, csv, preds];
    if let Some(p) = plots {
        out.extend(emit_plot_csvs(p, Some(&ev.comparison), None, &ev.model)?);
    }
    Ok(out)
}

fn write_suppression(dir: &Path, report: &SuppressionReport, plots: Option<&Path>) -> Result<Vec<PathBuf>, Error> {
    let json = dir.join("suppression.json");
    write_json(&json, report)?;
    let csv = dir.join("suppression.csv");
    write_suppression_csv(create(&csv)?, report)?;
    let mut out = vec![json, csv];
    if let Some(p) = plots {
        out.extend(emit_plot_csvs(p, None, Some(report), &[])?);
    }
    Ok(out)
}

fn plots_dir(dir: &Path, on: bool) -> Option<PathBuf> {
    on.then(|| dir.join("plots"))
}

pub fn run(command: Command, mut cfg: PipelineConfig) -> Result<(), Error> {
    match command {
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::Validate { files, output } => {
            #[derive(Serialize)]
            struct Entry {
                file: PathBuf,
                subject_id: String,
                video_id: String,
                report: attnsync::landmark_io::StreamReport,
            }
            let mut entries = Vec::new();
            for file in &files {
                let s = read_stream_file(file)?;
                entries.push(Entry { file: file.clone(), report: validate_stream(&s), subject_id: s.subject_id, video_id: s.video_id });
            }
            match output {
                None => {
                    for e in &entries {
                        println!("{}", serde_json::to_string(e).map_err(|e| Error::Io(e.to_string()))?);
                    }
                    Ok(())
                }
                Some(dir) => {
                    let dir = output_dir(Some(dir), &mut cfg)?;
                    let path = dir.join("reports.json");
                    write_json(&path, &entries)?;
                    let inputs = input_digests(&files.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
                    finish(&dir, "validate", &cfg, &inputs, &[path])
                }
            }
        }
        Command::Align { files, output, window } => {
            apply_window(&mut cfg, &window);
            let dir = output_dir(output, &mut cfg)?;
            let model = cfg.face_model()?;
            let mut written = Vec::new();
            for file in &files {
                let s = fill_gaps(&read_stream_file(file)?, cfg.stream.max_gap_s)?;
                let aligned = align_stream(&s, &model)?;
                let name = stream_file_name(&s.subject_id, &s.video_id).replace(".jsonl", ".aligned.jsonl");
                let path = dir.join(name);
                let mut w = create(&path)?;
                write_aligned(&aligned, &mut w)?;
                w.flush()?;
                written.push(path);
            }
            let mut inputs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
            inputs.extend(config_inputs(&cfg));
            finish(&dir, "align", &cfg, &input_digests(&inputs)?, &written)
        }
        Command::Isc { input, output, window } => {
            apply_window(&mut cfg, &window);
            let input = input_dir(input, &mut cfg)?;
            let model = cfg.face_model()?;
            let files = stream_files(&input)?;
            let processed = files
                .iter()
                .map(|f| process_stream(&read_stream_file(f)?, &model, &cfg.stream))
                .collect::<Result<Vec<_>, Error>>()?;
            let traces = attnsync::pipeline::cohort_traces(&processed, &cfg.window)?;
            let dir = output_dir(output, &mut cfg)?;
            let written = write_traces(&dir, &traces)?;
            let mut inputs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
            inputs.extend(config_inputs(&cfg));
            finish(&dir, "isc", &cfg, &input_digests(&inputs)?, &written)
        }
        Command::BuildDataset { input, output, split, window } => {
            apply_window(&mut cfg, &window);
            if let Some(s) = split {
                cfg.split = s;
            }
            let input = input_dir(input, &mut cfg)?;
            let model = cfg.face_model()?;
            let files = stream_files(&input)?;
            let processed = files
                .iter()
                .map(|f| process_stream(&read_stream_file(f)?, &model, &cfg.stream))
                .collect::<Result<Vec<_>, Error>>()?;
            let (traces, samples, report) = labelled_windows(&processed, &cfg.window)?;
            let split = split_dataset(&samples, &cfg.split, cfg.seed)?;
            let dir = output_dir(output, &mut cfg)?;
            save_dataset(&dir, &split, &cfg.window)?;
            write_json(&dir.join("build_report.json"), &report)?;
            write_traces(&dir.join("traces"), &traces)?;
            let mut inputs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
            inputs.extend(config_inputs(&cfg));
            let inputs = input_digests(&inputs)?;
            finish(&dir, "build-dataset", &cfg, &inputs, &[dir.clone()])
        }
        Command::Train { dataset, output, train } => {
            apply_train(&mut cfg, &train);
            let (_, split) = load_dataset(&dataset)?;
            let artifact = train_with_progress(&split, &cfg.model_config(), &cfg.train_config(), log_epoch)?;
            let dir = output_dir(output, &mut cfg)?;
            let path = dir.join("model.bin");
            artifact.save(&path)?;
            finish(&dir, "train", &cfg, &input_digests(&[&dataset])?, &[path])
        }
        Command::Predict { model, dataset, split_name, input, output, clamp01, window } => {
            apply_window(&mut cfg, &window);
            cfg.clamp01 |= clamp01;
            let artifact = ModelArtifact::load(&model)?;
            let mut inputs = vec![model.clone()];
            let samples = match dataset {
                Some(d) => {
                    let samples = pick_split(load_dataset(&d)?.1, &split_name)?;
                    inputs.push(d);
                    samples
                }
                None => {
                    let input = input_dir(input, &mut cfg)?;
                    let face = cfg.face_model()?;
                    let mut samples = Vec::new();
                    for f in stream_files(&input)? {
                        let p = process_stream(&read_stream_file(&f)?, &face, &cfg.stream)?;
                        samples.extend(unlabelled_windows(&p.features, &cfg.window)?);
                        inputs.push(f);
                    }
                    samples
                }
            };
            let mut preds = predict(&artifact, &samples)?;
            if cfg.clamp01 {
                for p in &mut preds {
                    p.y_pred = p.y_pred.clamp(0.0, 1.0);
                }
            }
            let dir = output_dir(output, &mut cfg)?;
            let path = dir.join("predictions.csv");
            write_predictions_csv(create(&path)?, &preds)?;
            let inputs = input_digests(&inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
            finish(&dir, "predict", &cfg, &inputs, &[path])
        }
        Command::Evaluate { model, dataset, split_name, output, report: ReportArgs { clamp01, emit_plots } } => {
            cfg.clamp01 |= clamp01;
            let artifact = ModelArtifact::load(&model)?;
            let (_, split) = load_dataset(&dataset)?;
            let targets: Vec<f32> = split.train.iter().map(|s| s.y).collect();
            let samples = pick_split(split, &split_name)?;
            let ev = evaluate(&artifact, &targets, &samples, cfg.clamp01)?;
            let dir = output_dir(output, &mut cfg)?;
            let written = write_evaluation(&dir, &ev, plots_dir(&dir, emit_plots).as_deref())?;
            finish(&dir, "evaluate", &cfg, &input_digests(&[&model, &dataset])?, &written)
        }
        Command::Suppress { model, dataset, split_name, output, emit_plots } => {
            let artifact = ModelArtifact::load(&model)?;
            let samples = pick_split(load_dataset(&dataset)?.1, &split_name)?;
            let report = suppression_study(&artifact, &samples, &cfg.groups()?)?;
            let dir = output_dir(output, &mut cfg)?;
            let written = write_suppression(&dir, &report, plots_dir(&dir, emit_plots).as_deref())?;
            let mut inputs: Vec<&Path> = vec![&model, &dataset];
            inputs.extend(config_inputs(&cfg));
            finish(&dir, "suppress", &cfg, &input_digests(&inputs)?, &written)
        }
        Command::Synth { output, subjects, videos, duration, coupling, noise, informative } => {
            let s = &mut cfg.synth;
            if let Some(v) = subjects {
                s.n_subjects = v;
            }
            if let Some(v) = videos {
                s.n_videos = v;
            }
            if let Some(v) = duration {
                s.duration_s = v;
            }
            if let Some(v) = coupling {
                s.coupling = v;
            }
            if let Some(v) = noise {
                s.noise_sd = v;
            }
            if let Some(v) = informative {
                s.informative_groups = v.into_iter().filter(|g| !g.is_empty()).collect();
            }
            let cohort = SyntheticCohort::new(cfg.synth.clone())?;
            let dir = output_dir(output, &mut cfg)?;
            let mut written = cohort.write(&dir)?;
            written.sort();
            finish(&dir, "synth", &cfg, &[], &written)
        }
        Command::Pipeline { input, output, split, window, train, report: ReportArgs { clamp01, emit_plots } } => {
            apply_window(&mut cfg, &window);
            apply_train(&mut cfg, &train);
            if let Some(s) = split {
                cfg.split = s;
            }
            cfg.clamp01 |= clamp01;
            let input = input_dir(input, &mut cfg)?;
            let dir = output_dir(output, &mut cfg)?;
            let face = cfg.face_model()?;
            let groups = cfg.groups()?;
            let files = stream_files(&input)?;
            let experiment = ExperimentConfig {
                window: cfg.window,
                stream: cfg.stream,
                split: cfg.split.clone(),
                split_seed: cfg.seed,
                model: cfg.model_config(),
                train: cfg.train_config(),
                clamp01: cfg.clamp01,
            };
            let streams = files.iter().map(|f| read_stream_file(f).map_err(Error::from));
            let ex = run_experiment(streams, &face, &experiment, &groups, log_epoch)?;

            let mut written = Vec::new();
            let reports = dir.join("stream_reports.json");
            #[derive(Serialize)]
            struct Entry<'a> {
                subject_id: &'a str,
                video_id: &'a str,
                report: &'a attnsync::landmark_io::StreamReport,
            }
            let entries: Vec<Entry> =
                ex.reports.iter().map(|(s, v, r)| Entry { subject_id: s, video_id: v, report: r }).collect();
            write_json(&reports, &entries)?;
            written.push(reports);
            written.extend(write_traces(&dir.join("traces"), &ex.traces)?);
            let data = dir.join("dataset");
            save_dataset(&data, &ex.split, &cfg.window)?;
            write_json(&data.join("build_report.json"), &ex.build)?;
            written.push(data);
            let model = dir.join("model.bin");
            ex.artifact.save(&model)?;
            written.push(model);
            let plots = plots_dir(&dir, emit_plots);
            written.extend(write_evaluation(&dir, &ex.evaluation, plots.as_deref())?);
            if let Some(s) = &ex.suppression {
                written.extend(write_suppression(&dir, s, plots.as_deref())?);
            }
            let mut inputs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
            inputs.extend(config_inputs(&cfg));
            finish(&dir, "pipeline", &cfg, &input_digests(&inputs)?, &written)
        }
    }
}
