use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use precofact::training::model_from_checkpoint;
use precofact::{
    combine, dataset_stats, generate_synthetic as synthesize, grid_search, load_model,
    read_checkpoint, read_dataset, read_predictions, save_model, write_dataset, write_predictions,
    Category, Dataset, EnsembleConfig, Error, ModelConfig, ModelParams, Parameters, PredictionSet,
    SyntheticSpec, SyntheticTask, TokenCounts, Trainer, CLASS_COUNT,
};
use serde_json::json;

use crate::config::RunConfigFile;
use crate::error::{CliError, CliResult, EXIT_DATA};
use crate::{EnsembleArgs, EvalArgs, InspectArgs, PredictArgs, SyntheticArgs, TrainArgs};

const MAX_GRID_POINTS: usize = 1_000_000;

fn check_data(ds: &Dataset, model: &ModelConfig, what: &str, labeled: bool) -> CliResult<()> {
    ds.header
        .check_widths(model.input_width_text, model.input_width_image)?;
    if labeled && !ds.header.labeled {
        return Err(Error::Contract(format!("{what} set is unlabeled")).into());
    }
    if ds.is_empty() {
        return Err(Error::Contract(format!("{what} set is empty")).into());
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> precofact::Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn train(args: TrainArgs) -> CliResult<()> {
    let run = RunConfigFile::load(&args.config)?;
    let train_path = args
        .train_data
        .or(run.paths.train)
        .ok_or_else(|| CliError::flags("no training data: pass --train-data or set paths.train"))?;
    let val_path = args.val_data.or(run.paths.validation);
    let out = args
        .out
        .or(run.paths.output)
        .ok_or_else(|| CliError::flags("no output directory: pass --out or set paths.output"))?;
    let mut train_config = run.train;
    if let Some(seed) = args.seed {
        train_config.seed = seed;
    }

    let mut trainer = match &args.resume {
        Some(state) => {
            let mut trainer = Trainer::<f32>::load_state(state)?;
            if trainer.params().config() != &run.model {
                return Err(CliError::config(
                    "the [model] section differs from the resumed state",
                ));
            }
            trainer.set_epochs(train_config.epochs);
            trainer
        }
        None => Trainer::new(run.model, train_config)?,
    };
    let model = *trainer.params().config();
    let train_set = read_dataset(&train_path)?;
    check_data(&train_set, &model, "training", true)?;
    let val_set = val_path.map(read_dataset).transpose()?;
    if let Some(v) = &val_set {
        check_data(v, &model, "validation", true)?;
    }

    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let log_path = out.join("epochs.jsonl");
    let state_path = out.join("state.pcfm");
    let every = trainer.config().checkpoint_every;
    trainer.fit(
        &train_set.samples,
        val_set.as_ref().map(|v| v.samples.as_slice()),
        |t, record| {
            println!("{}", record.to_json_line());
            let lines: String = t.log().iter().map(|r| r.to_json_line() + "\n").collect();
            write_text(&log_path, &lines)?;
            if every > 0 && record.epoch % every == 0 {
                t.save_state(&state_path)?;
            }
            Ok(())
        },
    )?;
    save_model(trainer.selected_params(), out.join("model.pcfm"))?;
    if let Some((epoch, score)) = trainer.best_epoch() {
        eprintln!("selected epoch {epoch} (validation weighted F1 {score:.4})");
    }
    Ok(())
}

fn predictions(model: &ModelParams<f32>, data: &Dataset, tag: String) -> CliResult<PredictionSet> {
    let probs = model
        .predict(&data.samples)?
        .into_iter()
        .map(|row| row.map(f64::from))
        .collect();
    let ids = data.samples.iter().map(|s| s.id.clone()).collect();
    Ok(PredictionSet::new(tag, ids, probs)?)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

pub fn eval(args: EvalArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let data = read_dataset(&args.data)?;
    check_data(&data, model.config(), "evaluation", true)?;
    let set = predictions(&model, &data, stem(&args.model))?;
    let labels = data
        .labels()
        .ok_or_else(|| Error::Contract("evaluation set has unlabeled samples".into()))?;
    let report = set.evaluate(&labels)?;
    if args.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.table());
    }
    if let Some(path) = &args.dump_preds {
        write_predictions(&set, path)?;
    }
    Ok(())
}

pub fn predict(args: PredictArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let data = read_dataset(&args.data)?;
    check_data(&data, model.config(), "input", false)?;
    let set = predictions(&model, &data, args.tag.unwrap_or_else(|| stem(&args.model)))?;
    write_predictions(&set, &args.out)?;
    println!("{}", json!({ "samples": set.len(), "out": args.out }));
    Ok(())
}

/// Labels of `ids` looked up in a labeled dataset.
fn labels_for(ids: &[String], path: &Path) -> CliResult<Vec<usize>> {
    let data = read_dataset(path)?;
    if !data.header.labeled {
        return Err(Error::Contract("label set is unlabeled".into()).into());
    }
    let by_id: HashMap<&str, Category> = data
        .samples
        .iter()
        .filter_map(|s| s.label.map(|l| (s.id.as_str(), l)))
        .collect();
    let missing: Vec<String> = ids
        .iter()
        .filter(|id| !by_id.contains_key(id.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Join(missing).into());
    }
    Ok(ids.iter().map(|id| by_id[id.as_str()].index()).collect())
}

fn weight_grid(values: &[f64], members: usize, powers: usize) -> CliResult<Vec<Vec<f64>>> {
    u32::try_from(members)
        .ok()
        .and_then(|k| values.len().checked_pow(k))
        .and_then(|n| n.checked_mul(powers))
        .filter(|&n| n <= MAX_GRID_POINTS)
        .ok_or_else(|| CliError::flags(format!("grid exceeds {MAX_GRID_POINTS} points")))?;
    let mut grid: Vec<Vec<f64>> = vec![Vec::new()];
    for _ in 0..members {
        grid = grid
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |&v| {
                    let mut next = prefix.clone();
                    next.push(v);
                    next
                })
            })
            .collect();
    }
    grid.retain(|w| w.iter().any(|&v| v > 0.0));
    Ok(grid)
}

pub fn ensemble(args: EnsembleArgs) -> CliResult<()> {
    let members = args
        .preds
        .iter()
        .map(read_predictions)
        .collect::<precofact::Result<Vec<_>>>()?;
    let labels = match &args.labels {
        Some(path) => Some(labels_for(&members[0].ids, path)?),
        None => None,
    };

    let config = if args.grid {
        let labels = labels
            .as_deref()
            .ok_or_else(|| CliError::flags("--grid needs --labels"))?;
        if !args.weights.is_empty() {
            return Err(CliError::flags("--weights cannot be combined with --grid"));
        }
        if args
            .grid_weights
            .iter()
            .chain(&args.grid_powers)
            .any(|v| !v.is_finite())
        {
            return Err(CliError::flags("grid values must be finite"));
        }
        let grid = weight_grid(&args.grid_weights, members.len(), args.grid_powers.len())?;
        let search =
            grid_search(&members, &grid, &args.grid_powers, labels).map_err(|e| match e {
                Error::Config(detail) => CliError::flags(detail),
                other => other.into(),
            })?;
        println!(
            "{}",
            json!({
                "weights": search.best.weights,
                "power": search.best.power,
                "weighted_f1": search.best_weighted_f1,
                "points": search.table.len(),
            })
        );
        search.best
    } else {
        if args.weights.len() != members.len() {
            return Err(CliError::flags(format!(
                "{} prediction files but {} weights",
                members.len(),
                args.weights.len()
            )));
        }
        EnsembleConfig::new(args.weights.clone(), args.power)
            .map_err(|e| CliError::flags(e.to_string()))?
    };

    let combined = combine(&members, &config)?;
    if let Some(labels) = &labels {
        print!("{}", combined.evaluate(labels)?.table());
    }
    match &args.out {
        Some(path) => write_predictions(&combined, path)?,
        None if labels.is_none() => {
            for (id, row) in combined.ids.iter().zip(&combined.probs) {
                let values: Vec<String> = row.iter().map(|p| format!("{p:.6}")).collect();
                println!("{id} {}", values.join(" "));
            }
        }
        None => {}
    }
    Ok(())
}

pub fn generate_synthetic(args: SyntheticArgs) -> CliResult<()> {
    let task: SyntheticTask = args
        .task
        .parse()
        .map_err(|e: Error| CliError::flags(e.to_string()))?;
    let spec = SyntheticSpec {
        samples_per_class: args.samples_per_class,
        tokens: TokenCounts {
            claim_image: args.tokens[0],
            claim_text: args.tokens[1],
            doc_image: args.tokens[2],
            doc_text: args.tokens[3],
        },
        text_width: args.text_width,
        image_width: args.image_width,
        separation: args.separation,
        seed: args.seed,
        labeled: !args.unlabeled,
        task,
    };
    let ds = synthesize(&spec).map_err(|e| match e {
        Error::InvalidInput(detail) => CliError::flags(detail),
        other => other.into(),
    })?;
    write_dataset(&ds, &args.out)?;
    println!("{}", json!({ "samples": ds.len(), "out": args.out }));
    Ok(())
}

fn magic(path: &PathBuf) -> CliResult<[u8; 4]> {
    let mut buf = [0u8; 4];
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut read = 0;
    while read < 4 {
        match file
            .read(&mut buf[read..])
            .map_err(|e| Error::io(path, e))?
        {
            0 => break,
            n => read += n,
        }
    }
    Ok(buf)
}

pub fn inspect(args: InspectArgs) -> CliResult<()> {
    let mut out = String::new();
    match &magic(&args.path)? {
        b"PCF1" => {
            let ds = read_dataset(&args.path)?;
            let stats = dataset_stats(&ds);
            out += &format!("format PCF1\nversion {}\n", ds.header.version);
            out += &format!(
                "text_width {}\nimage_width {}\n",
                ds.header.text_width, ds.header.image_width
            );
            out += &format!("samples {}\nlabeled {}\n", stats.samples, ds.header.labeled);
            if let Some(counts) = stats.class_counts {
                for (c, n) in Category::ALL.iter().zip(counts) {
                    out += &format!("class {} {n}\n", c.name());
                }
            }
            for (source, summary) in stats.lengths {
                if let Some(s) = summary {
                    out += &format!(
                        "tokens {source} min {} mean {:.2} max {}\n",
                        s.min, s.mean, s.max
                    );
                }
            }
        }
        b"PCFM" => {
            let ck = read_checkpoint(&args.path)?;
            let total: usize = ck.records.iter().map(|(_, t)| t.len()).sum();
            out += &format!(
                "format PCFM\nrecords {}\nvalues {total}\n",
                ck.records.len()
            );
            if let Ok(model) = model_from_checkpoint(&ck) {
                let c = model.config();
                out += &format!(
                    "model variant {} activation {} d {} heads {} d_ff {} d_m1 {} parameters {}\n",
                    c.variant.name(),
                    c.activation.name(),
                    c.d,
                    c.heads,
                    c.d_ff,
                    c.d_m1,
                    model.param_count()
                );
            }
            for (name, t) in &ck.records {
                out += &format!("record {name} {:?}\n", t.shape());
            }
        }
        b"PCFP" => {
            let set = read_predictions(&args.path)?;
            out += &format!("format PCFP\ntag {}\nsamples {}\n", set.tag, set.len());
            let mut counts = [0usize; CLASS_COUNT];
            for p in set.predictions() {
                counts[p] += 1;
            }
            for (c, n) in Category::ALL.iter().zip(counts) {
                out += &format!("predicted {} {n}\n", c.name());
            }
        }
        other => {
            return Err(CliError {
                code: EXIT_DATA,
                category: "bad-magic".into(),
                detail: format!("{}: unrecognized magic {other:?}", args.path.display()),
            })
        }
    }
    std::io::stdout()
        .write_all(out.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}
