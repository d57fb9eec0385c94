use std::path::{Path, PathBuf};

use basm_core::features::{read_jsonl, read_vocab, validate_dataset, VocabFile};
use basm_core::harness::{
    ablate, ablation_csv, curve_csv, evaluate, export_gate_heatmap, gate_recovery, gradcheck_model, heatmap_csv,
    history_batch, score, split_by_request, train, Checkpoint,
};
use basm_core::metrics::{read_predictions, write_predictions, MetricReport, ScoredRecord};
use basm_core::synthgen::{generate, read_truth, write_outputs, FIELDS};
use basm_core::{BasmModel, Error, Impression, Result, Vocabulary};
use log::info;
use serde::Serialize;

use crate::config::FileConfig;
use crate::manifest::Manifest;
use crate::{Cli, Command};

struct Run {
    dir: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))?;
        self.manifest.outputs.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).expect("output serializes");
        self.write_text(name, &(text + "\n"))
    }

    fn write_report(&mut self, report: &MetricReport) -> Result<()> {
        report.write_json(&self.dir.join("report.json"))?;
        report.write_group_csv(&self.dir.join("groups.csv"))?;
        self.manifest.outputs.extend(["report.json".into(), "groups.csv".into()]);
        info!(
            "auc {:.4} tauc {:.4} cauc {:.4} logloss {:.4}",
            report.auc, report.tauc, report.cauc, report.logloss
        );
        Ok(())
    }

    fn write_predictions(&mut self, records: &[ScoredRecord]) -> Result<()> {
        write_predictions(&self.dir.join("predictions.csv"), records)?;
        self.manifest.outputs.push("predictions.csv".into());
        Ok(())
    }

    fn finish(self) -> Result<()> {
        self.manifest.write(&self.dir)?;
        info!("outputs in {}", self.dir.display());
        Ok(())
    }
}

fn data_dir(cfg: &FileConfig) -> Result<&Path> {
    cfg.data
        .dir
        .as_deref()
        .ok_or_else(|| Error::Config("no dataset directory: pass --data or set [data] dir".into()))
}

fn load_data(dir: &Path) -> Result<(VocabFile, Vec<Impression>)> {
    let vocab = read_vocab(&dir.join("vocab.json"))?;
    let data = read_jsonl(&dir.join("dataset.jsonl"))?;
    if data.is_empty() {
        return Err(Error::Data(format!("{} holds no impressions", dir.join("dataset.jsonl").display())));
    }
    Ok((vocab, data))
}

fn check_against(vocab: &Vocabulary, data: &[Impression]) -> Result<()> {
    validate_dataset(vocab, data)
}

fn load_checkpoint_model(path: &Path) -> Result<BasmModel> {
    Checkpoint::load(path)?.model()
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let name = cli.command.name();
    match &cli.command {
        Command::Generate(g) => g.apply(&mut cfg.generate),
        Command::Train { data, model, train } => {
            data.apply(&mut cfg.data);
            model.apply(&mut cfg.model);
            train.apply(&mut cfg.train);
        }
        Command::Evaluate { data, .. } | Command::ExportHeatmap { data, .. } => data.apply(&mut cfg.data),
        Command::Ablate {
            data,
            model,
            train,
            repeats,
        } => {
            data.apply(&mut cfg.data);
            model.apply(&mut cfg.model);
            train.apply(&mut cfg.train);
            if let Some(r) = repeats {
                cfg.ablate.repeats = *r;
            }
        }
        Command::Gradcheck {
            data,
            model,
            eps,
            rows,
            stride,
            tolerance,
            ..
        } => {
            data.apply(&mut cfg.data);
            model.apply(&mut cfg.model);
            let g = &mut cfg.gradcheck;
            g.eps = eps.unwrap_or(g.eps);
            g.rows = rows.unwrap_or(g.rows);
            g.stride = stride.unwrap_or(g.stride);
            g.tolerance = tolerance.unwrap_or(g.tolerance);
        }
    }
    if let Some(d) = &cli.run_dir {
        cfg.run_dir = Some(d.clone());
    }
    let dir = cfg.run_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut run = Run {
        dir,
        manifest: Manifest::new(name, cli.config.clone(), cfg.clone()),
    };

    match cli.command {
        Command::Generate(_) => {
            let gen = &cfg.generate;
            gen.validate()?;
            let g = generate(gen)?;
            write_outputs(&run.dir, gen, &g)?;
            run.manifest.seeds.insert("generate", gen.seed);
            run.manifest.outputs.extend(
                ["dataset.jsonl", "truth.json", "vocab.json", "stats.csv"].map(String::from),
            );
            let clicks = g.impressions.iter().filter(|i| i.label == 1).count();
            info!("{} impressions, {clicks} clicks", g.impressions.len());
        }
        Command::Train { .. } => {
            let dir = data_dir(&cfg)?;
            let (vocab, data) = load_data(dir)?;
            let mc = cfg.model.build(&vocab, &data[0])?;
            check_against(&Vocabulary::new(mc.schema.clone())?, &data)?;
            let (tr, ev) = split_by_request(&data, cfg.data.eval_fraction)?;
            run.manifest.inputs.push(dir.to_path_buf());
            run.manifest.seeds.insert("model", mc.seed);
            run.manifest.seeds.insert("train", cfg.train.seed);
            info!("{} training and {} held-out impressions", tr.len(), ev.len());
            let out = train(Checkpoint::init(mc, cfg.train.adagrad_init)?, &cfg.train, &tr, &ev)?;
            if out.skipped_steps > 0 {
                log::warn!("{} steps skipped for non-finite gradients", out.skipped_steps);
            }
            out.checkpoint.save(&run.dir.join("checkpoint.json"))?;
            run.manifest.outputs.push("checkpoint.json".into());
            run.write_text("curve.csv", &curve_csv(&out.curve))?;
            if !ev.is_empty() {
                let (report, records) = evaluate(&out.checkpoint.model()?, &ev)?;
                run.write_report(&report)?;
                run.write_predictions(&records)?;
            }
        }
        Command::Evaluate {
            predictions,
            checkpoint,
            all,
            ..
        } => {
            let records = match (predictions, checkpoint) {
                (Some(p), _) => {
                    run.manifest.inputs.push(p.clone());
                    read_predictions(&p)?
                }
                (None, Some(ck)) => {
                    let dir = data_dir(&cfg)?;
                    let model = load_checkpoint_model(&ck)?;
                    let (_, data) = load_data(dir)?;
                    check_against(&model.vocab, &data)?;
                    let data = if all { data } else { split_by_request(&data, cfg.data.eval_fraction)?.1 };
                    run.manifest.inputs.extend([ck, dir.to_path_buf()]);
                    let records = score(&model, &data)?;
                    run.write_predictions(&records)?;
                    records
                }
                (None, None) => {
                    return Err(Error::Config("evaluate needs --predictions or --checkpoint with --data".into()))
                }
            };
            run.write_report(&MetricReport::compute(&records)?)?;
        }
        Command::Ablate { .. } => {
            let dir = data_dir(&cfg)?;
            let (vocab, data) = load_data(dir)?;
            let mc = cfg.model.build(&vocab, &data[0])?;
            check_against(&Vocabulary::new(mc.schema.clone())?, &data)?;
            let (tr, ev) = split_by_request(&data, cfg.data.eval_fraction)?;
            if ev.is_empty() {
                return Err(Error::Config("ablation needs held-out requests (eval_fraction > 0)".into()));
            }
            run.manifest.inputs.push(dir.to_path_buf());
            run.manifest.seeds.insert("model", mc.seed);
            run.manifest.seeds.insert("train", cfg.train.seed);
            let (rows, runs) = ablate(&mc, &cfg.train, cfg.ablate.repeats, &tr, &ev)?;
            let table = ablation_csv(&rows);
            print!("{table}");
            run.write_text("ablation.csv", &table)?;
            run.write_json("ablation_runs.json", &runs)?;
        }
        Command::Gradcheck { checkpoint, .. } => {
            let dir = data_dir(&cfg)?;
            let (vocab, data) = load_data(dir)?;
            let model = match &checkpoint {
                Some(ck) => load_checkpoint_model(ck)?,
                None => BasmModel::new(cfg.model.build(&vocab, &data[0])?)?,
            };
            check_against(&model.vocab, &data)?;
            run.manifest.inputs.push(dir.to_path_buf());
            run.manifest.inputs.extend(checkpoint);
            run.manifest.seeds.insert("model", model.config.seed);
            let g = &cfg.gradcheck;
            let batch = history_batch(&data, g.rows, g.stride)?;
            let report = gradcheck_model(&model, &batch, g.eps)?;
            let pass = report.max_rel_error < g.tolerance;
            #[derive(Serialize)]
            struct Summary<'a> {
                eps: f64,
                tolerance: f64,
                rows: usize,
                entries_checked: usize,
                max_rel_error: f64,
                worst: &'a Option<(String, usize)>,
                pass: bool,
            }
            run.write_json(
                "gradcheck.json",
                &Summary {
                    eps: g.eps,
                    tolerance: g.tolerance,
                    rows: batch.len(),
                    entries_checked: report.entries_checked,
                    max_rel_error: report.max_rel_error,
                    worst: &report.worst,
                    pass,
                },
            )?;
            println!(
                "{}: max relative error {:.3e} over {} entries (worst {:?})",
                if pass { "PASS" } else { "FAIL" },
                report.max_rel_error,
                report.entries_checked,
                report.worst
            );
            if !pass {
                run.finish()?;
                return Err(Error::Numeric(format!(
                    "gradient check error {:.3e} exceeds tolerance {:.1e}",
                    report.max_rel_error, g.tolerance
                )));
            }
        }
        Command::ExportHeatmap {
            checkpoint,
            eval_only,
            ..
        } => {
            let dir = data_dir(&cfg)?;
            let model = load_checkpoint_model(&checkpoint)?;
            let (_, data) = load_data(dir)?;
            check_against(&model.vocab, &data)?;
            let data = if eval_only { split_by_request(&data, cfg.data.eval_fraction)?.1 } else { data };
            run.manifest.inputs.extend([checkpoint, dir.to_path_buf()]);
            let rows = export_gate_heatmap(&model, &data)?;
            run.write_text("heatmap.csv", &heatmap_csv(&rows))?;
            let truth = dir.join("truth.json");
            if truth.exists() {
                let phi = read_truth(&truth)?.phi;
                let rho = gate_recovery(&rows, &phi, &FIELDS)?;
                for (t, r) in &rho {
                    info!("time-period {t}: Spearman(planted importance, mean gate) = {r:.3}");
                }
                run.write_json("gate_recovery.json", &rho)?;
            }
        }
    }
    run.finish()
}
