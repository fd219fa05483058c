use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use fdnet_core::bands::band_partition;
use fdnet_core::checkpoint::load_checkpoint;
use fdnet_core::config::{read_json, RunConfig};
use fdnet_core::data::{read_pgm, read_ppm, write_pgm, Dataset, SyntheticSpec};
use fdnet_core::gradcheck::{run_check, OPS, TOLERANCE};
use fdnet_core::network::build_fdnet;
use fdnet_core::raster::LabelMap;
use fdnet_core::train::{evaluate_pairs, parse_scales, predict_multiscale, train, InferenceOptions, TrainHooks};
use fdnet_core::{Error, Result};

use crate::{Cli, Command};

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let jobs = cli.jobs.max(1);
    match cli.command {
        Command::Gen { spec, out, seed, samples } => {
            let mut spec: SyntheticSpec = read_json(&spec)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(n) = samples {
                spec.samples = n;
            }
            let ds = Dataset::synthetic(&spec)?;
            ds.save(&out, Some(spec))?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Train { config, out, seed, max_iter } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(n) = max_iter {
                cfg.train.max_iter = n;
            }
            cfg.validate()?;
            let base = base_dir(&config);
            let data = cfg.training_set(&base)?;
            let eval = cfg.evaluation_set(&base)?;
            let mut net = build_fdnet(&cfg.network, cfg.train.seed)?;
            let hooks = TrainHooks {
                out_dir: Some(&out),
                eval_set: eval.as_ref(),
            };
            let outcome = train(&mut net, &data, &cfg.train, &cfg.loss_config(), hooks)?;
            let last = outcome.log.last().expect("max_iter >= 1");
            println!("iterations: {}", outcome.log.len());
            println!("final loss: {}", last.loss);
            if let Some(m) = last.eval_miou {
                println!("eval mIoU: {}", m);
            }
            if let Some(p) = outcome.final_checkpoint {
                println!("checkpoint: {}", p.display());
            }
        }
        Command::Eval {
            checkpoint,
            predictions,
            data,
            scales,
            flip,
            trimap,
            out,
        } => {
            let ds = Dataset::load(&data)?;
            let pairs: Vec<(LabelMap, LabelMap)> = match (checkpoint, predictions) {
                (Some(ckpt), _) => {
                    let (net, meta) = load_checkpoint(&ckpt)?;
                    if net.spec.class_count != ds.class_count {
                        return Err(Error::Validation {
                            field: "data".into(),
                            reason: format!("dataset has {} classes, checkpoint {}", ds.class_count, net.spec.class_count),
                        });
                    }
                    let means = if meta.channel_means.len() == net.spec.in_channels { meta.channel_means } else { ds.channel_means.clone() };
                    let opts = InferenceOptions {
                        scales: parse_scales(&scales)?,
                        flip,
                        channel_means: means,
                        jobs,
                    };
                    ds.samples
                        .iter()
                        .map(|s| Ok((predict_multiscale(&net, &s.image, &opts)?.labels, s.labels.clone())))
                        .collect::<Result<_>>()?
                }
                (None, Some(dir)) => ds
                    .samples
                    .iter()
                    .map(|s| Ok((read_pgm(dir.join(format!("{}.pgm", s.id)))?, s.labels.clone())))
                    .collect::<Result<_>>()?,
                (None, None) => unreachable!("clap requires one of --checkpoint or --predictions"),
            };
            let report = evaluate_pairs(&pairs, ds.class_count, ds.ignore, &trimap)?;
            let json = serde_json::to_string_pretty(&report)? + "\n";
            match out {
                Some(p) => write_text(&p, &json)?,
                None => print!("{}", json),
            }
        }
        Command::Predict {
            checkpoint,
            image,
            out,
            scales,
            flip,
        } => {
            let (net, meta) = load_checkpoint(&checkpoint)?;
            let img = read_ppm(&image)?;
            let means = if meta.channel_means.len() == net.spec.in_channels { meta.channel_means } else { vec![0.5; net.spec.in_channels] };
            let opts = InferenceOptions {
                scales: parse_scales(&scales)?,
                flip,
                channel_means: means,
                jobs,
            };
            let pred = predict_multiscale(&net, &img, &opts)?;
            write_pgm(&pred.labels, &out)?;
            println!("wrote {} ({} passes averaged)", out.display(), pred.passes);
        }
        Command::Gradcheck { ops, seed } => {
            let names: Vec<&str> = if ops == "all" { OPS.to_vec() } else { ops.split(',').map(str::trim).collect() };
            for n in &names {
                if !OPS.contains(n) {
                    return Err(Error::Validation {
                        field: "ops".into(),
                        reason: format!("unknown op `{}`; known: {}", n, OPS.join(", ")),
                    });
                }
            }
            let mut failed = false;
            println!("{:<26} {:>12} {:>8}  result", "op", "max rel err", "coords");
            for n in names {
                let r = run_check(n, seed)?;
                failed |= !r.passed();
                println!(
                    "{:<26} {:>12.3e} {:>8}  {}",
                    r.op,
                    r.max_rel_error,
                    r.coordinates,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            println!("tolerance {:e}", TOLERANCE);
            if failed {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Bands {
            labels,
            kernels,
            out,
            ignore,
        } => {
            let l = read_pgm(&labels)?;
            let bands = band_partition(&l, &kernels, ignore)?;
            let visual = LabelMap::new(l.height, l.width, bands.to_visual())?;
            write_pgm(&visual, &out)?;
            let counts = bands.counts();
            for (j, c) in counts.iter().enumerate() {
                println!("band {}: {} pixels", j + 1, c);
            }
            println!("ignored: {} pixels", bands.ignored_count());
        }
        Command::Inspect { config } => {
            let cfg = RunConfig::load(&config)?;
            let net = build_fdnet(&cfg.network, cfg.train.seed)?;
            println!("parameters: {}", net.parameter_count());
            println!("{}", net.connectivity_report());
        }
    }
    Ok(ExitCode::SUCCESS)
}
