//! Subcommand bodies. Each prints small CSV tables on stdout with fixed
//! headers so downstream tooling can parse them; paths and progress notes
//! go to the log instead.

use std::fs;
use std::path::{Path, PathBuf};

use p2be_core::corruptions::{read_baseline_csv, CorruptionKind, CorruptionSpec};
use p2be_core::encoders::BinaryCodebook;
use p2be_core::io::{read_ppm, write_ppm, write_similarity_csv, write_similarity_pgm};
use p2be_core::training::{evaluate, metrics_csv, train, Checkpoint, EncoderKind};
use p2be_core::{corruptions, Error, Result};

use crate::config::RunConfig;

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::Config(format!(
            "cannot read checkpoint `{}`: no such file",
            path.display()
        )));
    }
    Checkpoint::load(path)
}

pub fn cmd_train(config_path: &Path, seed: Option<u64>, out_dir: Option<PathBuf>) -> Result<()> {
    let mut config = RunConfig::from_path(config_path)?;
    if let Some(seed) = seed {
        config.train.seed = seed;
    }
    if let Some(dir) = out_dir {
        config.out_dir = dir;
    }
    let dataset = config.data.load(config.train.seed)?;
    log::info!(
        "training {} epochs on {} samples ({} classes, {}x{})",
        config.train.epochs,
        dataset.len(),
        dataset.classes(),
        dataset.height(),
        dataset.width()
    );
    let output = train(&config.train, &dataset, &config.attack, None)?;

    fs::create_dir_all(&config.out_dir).map_err(|e| {
        Error::Config(format!("cannot create out_dir `{}`: {e}", config.out_dir.display()))
    })?;
    let checkpoint_path = config.out_dir.join("checkpoint.bin");
    let metrics_path = config.out_dir.join("metrics.csv");
    output.checkpoint.save(&checkpoint_path)?;
    fs::write(&metrics_path, metrics_csv(&output.metrics))?;
    log::info!("wrote {}", checkpoint_path.display());
    log::info!("wrote {}", metrics_path.display());

    let report = evaluate(&output.checkpoint, &dataset, None, None)?;
    println!("metric,value");
    println!("clean_error,{:.6}", report.clean_error);
    Ok(())
}

pub struct EvalFlags {
    pub corruptions: bool,
    pub baseline_csv: Option<PathBuf>,
    pub attack: bool,
    pub epsilon: Option<f32>,
}

pub fn cmd_eval(
    checkpoint_path: &Path,
    config_path: Option<&Path>,
    flags: &EvalFlags,
) -> Result<()> {
    let config = match config_path {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    let checkpoint = read_checkpoint(checkpoint_path)?;
    let dataset = config.data.load(checkpoint.config.seed)?;

    let specs = if flags.corruptions {
        let mut specs = Vec::new();
        for kind in CorruptionKind::ALL {
            for severity in 1..=5 {
                specs.push(CorruptionSpec::new(kind, severity, &config.corruptions)?);
            }
        }
        Some(specs)
    } else {
        None
    };
    let mut attack = config.attack;
    if let Some(epsilon) = flags.epsilon {
        attack.epsilon = epsilon;
    }
    if flags.attack {
        attack.validate()?;
    }

    let report = evaluate(
        &checkpoint,
        &dataset,
        specs.as_deref(),
        flags.attack.then_some(&attack),
    )?;

    let mut corrupted = report.corrupted;
    let ce_kinds = match (&mut corrupted, &flags.baseline_csv) {
        (Some(table), Some(path)) => {
            table.set_baseline(read_baseline_csv(path)?)?;
            Some(table.kinds())
        }
        _ => None,
    };

    println!("metric,value");
    println!("clean_error,{:.6}", report.clean_error);
    if let Some(error) = report.attacked_error {
        println!("attacked_error,{error:.6}");
    }
    if let Some(table) = &corrupted {
        println!("mean_corrupted_error,{:.6}", table.mean_error_cifar_style()?);
        if table.has_baseline() {
            println!("mce,{:.3}", table.mean_corruption_error()?);
        }
        println!();
        println!("kind,severity,error");
        for ((kind, severity), error) in table.model_entries() {
            println!("{kind},{severity},{error:.6}");
        }
        if let Some(kinds) = ce_kinds {
            println!();
            println!("kind,ce");
            for kind in kinds {
                println!("{kind},{:.6}", table.corruption_error(kind)?);
            }
        }
    }
    Ok(())
}

pub fn cmd_export_sim(
    checkpoint_path: Option<&Path>,
    encoder: Option<EncoderKind>,
    m: usize,
    out_prefix: &Path,
) -> Result<()> {
    let codebook = match (checkpoint_path, encoder) {
        (Some(path), None) => {
            let checkpoint = read_checkpoint(path)?;
            p2be_core::training::checkpoint_codebook(&checkpoint)?.ok_or_else(|| {
                Error::EncoderMismatch {
                    checkpoint: "rgb".into(),
                    requested: "similarity export".into(),
                }
            })?
        }
        (None, Some(kind)) => {
            if !(1..=256).contains(&m) {
                return Err(Error::Config(format!("m must lie in 1..=256, got {m}")));
            }
            match kind {
                EncoderKind::OneHot => BinaryCodebook::one_hot(m),
                EncoderKind::Thermometer => BinaryCodebook::thermometer(m),
                EncoderKind::P2be => {
                    return Err(Error::Config(
                        "the p2be encoder is learned; pass --checkpoint instead".into(),
                    ))
                }
                EncoderKind::Rgb => {
                    return Err(Error::Config(
                        "the rgb encoder has no codebook to export".into(),
                    ))
                }
            }
        }
        _ => {
            return Err(Error::Config(
                "pass exactly one of --checkpoint or --encoder".into(),
            ))
        }
    };

    let matrix = codebook.cosine_similarity_matrix();
    let pgm_path = out_prefix.with_extension("pgm");
    let csv_path = out_prefix.with_extension("csv");
    write_similarity_pgm(&pgm_path, &matrix)?;
    write_similarity_csv(&csv_path, &matrix)?;
    println!("artifact,path");
    println!("pgm,{}", pgm_path.display());
    println!("csv,{}", csv_path.display());
    Ok(())
}

pub fn cmd_corrupt(
    input: &Path,
    kind: &str,
    severity: u8,
    seed: u64,
    output: &Path,
    config_path: Option<&Path>,
) -> Result<()> {
    let kind: CorruptionKind = kind.parse().map_err(|_| {
        let valid: Vec<&str> = CorruptionKind::ALL.iter().map(|k| k.name()).collect();
        Error::Config(format!(
            "unknown corruption kind `{kind}` (valid kinds: {})",
            valid.join(", ")
        ))
    })?;
    let ladders = match config_path {
        Some(path) => RunConfig::from_path(path)?.corruptions,
        None => corruptions::CorruptionLadders::default(),
    };
    let spec = CorruptionSpec::new(kind, severity, &ladders)?;
    if !input.is_file() {
        return Err(Error::Config(format!(
            "cannot read image `{}`: no such file",
            input.display()
        )));
    }
    let image = read_ppm(input)?;
    let corrupted = corruptions::apply_corruption(&image, &spec, seed)?;
    write_ppm(output, &corrupted)?;
    log::info!("wrote {}", output.display());
    println!("kind,severity,parameter");
    println!("{},{},{:.6}", spec.kind, spec.severity, spec.parameter);
    Ok(())
}

pub fn cmd_defaults(output: &Path) -> Result<()> {
    fs::write(output, RunConfig::default().to_json()?)?;
    println!("artifact,path");
    println!("defaults,{}", output.display());
    Ok(())
}
