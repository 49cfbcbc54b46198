use std::fs;
use std::path::{Path, PathBuf};

use lapcomplete::checkpoint::Checkpoint;
use lapcomplete::config::RunConfig;
use lapcomplete::datagen::{generate_dataset, load_split, read_xyz, write_dataset, write_xyz, Split};
use lapcomplete::eval::evaluate;
use lapcomplete::geometry::{knn, Point};
use lapcomplete::gradcheck::{run_gradcheck, GradcheckConfig};
use lapcomplete::lsq::{laplacian_coordinates, LsqSystem};
use lapcomplete::train::{train as run_training, TrainOptions, BEST_CHECKPOINT};

use crate::error::CliError;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

pub fn gen_data(config: &RunConfig) -> Result<(), CliError> {
    let ds = generate_dataset(&config.dataset_config())?;
    let dir = &config.paths.data_dir;
    write_dataset(&ds, dir)?;
    println!(
        "wrote {} pairs to {} (train {}, val {}, test {})",
        ds.samples.len(),
        dir.display(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    );
    Ok(())
}

pub fn train(config: &RunConfig) -> Result<(), CliError> {
    let data = &config.paths.data_dir;
    let train_set = load_split(data, Split::Train)?;
    let val_set = load_split(data, Split::Val)?;
    let run_dir = config.paths.run_dir.clone();
    fs::create_dir_all(&run_dir).map_err(io(&run_dir))?;
    let config_path = run_dir.join("config.toml");
    fs::write(&config_path, config.to_toml()).map_err(io(&config_path))?;
    let outcome = run_training(
        config,
        &train_set,
        &val_set,
        &TrainOptions {
            run_dir: Some(run_dir.clone()),
            verbose: true,
            ..TrainOptions::default()
        },
    )?;
    let first = outcome.history.first().map_or(f64::NAN, |h| h.val_cd);
    let last = outcome.history.last().map_or(f64::NAN, |h| h.val_cd);
    println!("epoch 0 val CD {first:.6e}, final val CD {last:.6e}, best epoch {}", outcome.best_epoch);
    println!("checkpoints and log in {}", run_dir.display());
    Ok(())
}

fn load_checkpoint(config: &RunConfig, path: Option<PathBuf>) -> Result<Checkpoint, CliError> {
    let path = path.unwrap_or_else(|| config.paths.run_dir.join(BEST_CHECKPOINT));
    Ok(Checkpoint::load(&path)?)
}

pub fn eval(config: &RunConfig, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    let ck = load_checkpoint(config, checkpoint)?;
    let split: Split = config.eval.split.parse()?;
    let samples = load_split(&config.paths.data_dir, split)?;
    let table = evaluate(&ck.model, &samples, &config.eval, config.seed)?;
    println!(
        "split {split}, {} runs, input points {}, subsample {:?}, deformation {}",
        table.runs,
        if config.eval.input_points == 0 {
            "all".to_string()
        } else {
            config.eval.input_points.to_string()
        },
        config.eval.subsample,
        if config.eval.deformation { "on" } else { "off" }
    );
    println!("{table}");
    println!(
        "prediction->gt {:.4}, gt->prediction {:.4} (x 1e4)",
        table.pred_to_gt, table.gt_to_pred
    );
    Ok(())
}

fn sibling(output: &Path, suffix: &str) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{stem}.{suffix}"))
}

pub fn complete(
    config: &RunConfig,
    checkpoint: Option<PathBuf>,
    input: &Path,
    output: &Path,
    emit_intermediate: bool,
) -> Result<(), CliError> {
    let ck = load_checkpoint(config, checkpoint)?;
    let cloud = read_xyz(input)?;
    let (p_o, p_s, mask) = ck.model.complete(&cloud)?;
    write_xyz(output, &p_o)?;
    println!("wrote {} points to {}", p_o.len(), output.display());
    if emit_intermediate {
        let inter = sibling(output, "intermediate.xyz");
        write_xyz(&inter, &p_s)?;
        let mask_path = sibling(output, "mask.txt");
        let text: String = mask.iter().map(|&m| if m { "1\n" } else { "0\n" }).collect();
        fs::write(&mask_path, text).map_err(io(&mask_path))?;
        println!("wrote {} and {}", inter.display(), mask_path.display());
    }
    Ok(())
}

/// Lines of `index x y z`; blank lines and `#` comments are skipped.
fn read_controls(path: &Path) -> Result<(Vec<usize>, Vec<Point>), CliError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let mut indices = Vec::new();
    let mut targets = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |m: &str| CliError::Io(format!("{}:{}: {m}", path.display(), n + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(bad("expected `index x y z`"));
        }
        indices.push(fields[0].parse().map_err(|_| bad("bad index"))?);
        let mut p: Point = [0.0; 3];
        for (a, f) in fields[1..].iter().enumerate() {
            p[a] = f.parse().map_err(|_| bad("bad coordinate"))?;
            if !p[a].is_finite() {
                return Err(bad("non-finite coordinate"));
            }
        }
        targets.push(p);
    }
    Ok((indices, targets))
}

pub fn deform_lsq(
    config: &RunConfig,
    input: &Path,
    controls: &Path,
    output: &Path,
    control_weight: f64,
) -> Result<(), CliError> {
    let cloud = read_xyz(input)?;
    let (indices, targets) = read_controls(controls)?;
    let k = config.model.deform.k.min(cloud.len().saturating_sub(1));
    let graph = knn(&cloud, k).map_err(|e| CliError::Usage(e.to_string()))?;
    let delta = laplacian_coordinates(&cloud, &graph);
    let system = LsqSystem::new(graph, indices, targets, control_weight, delta)?;
    let solution = system.solve()?;
    write_xyz(output, &solution)?;
    println!(
        "wrote {} points to {} (objective {:.3e})",
        solution.len(),
        output.display(),
        system.objective(&solution)
    );
    Ok(())
}

pub fn gradcheck(config: &RunConfig, tolerance: f64) -> Result<(), CliError> {
    if !(tolerance >= 0.0) {
        return Err(CliError::Usage(format!("tolerance must be non-negative, got {tolerance}")));
    }
    let report = run_gradcheck(&GradcheckConfig {
        tolerance,
        seed: config.seed,
        ..GradcheckConfig::default()
    })
    .map_err(|e| CliError::Numeric(e.to_string()))?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        let failed = report.blocks.iter().filter(|b| !b.passed).count();
        Err(CliError::Numeric(format!("{failed} block(s) above tolerance {tolerance:e}")))
    }
}
