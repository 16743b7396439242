use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use probeopt::dataset::{load_samples, save_samples, write_samples_csv, DatasetHeader, LabeledSample, Split};
use probeopt::error::{Error, Result};
use probeopt::eval::empirical_cdf;
use probeopt::experiment::*;
use probeopt::mapper::RateMapperModel;
use probeopt::optimizer::{fitness, write_trace_csv};

#[derive(Parser)]
#[command(name = "probeopt", version, about = "Probing-beam combination optimization with PBM augmentation")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Simulate channels and write labeled PBM samples.
    Generate(Common),
    /// Train the PBM augmenter and the rate mapper.
    Train(Common),
    /// Select a probing combination from real and augmented rates.
    Optimize(Common),
    /// Sweep training sizes, report MMD, true means and the compression ratio.
    Evaluate(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment TOML; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Augmenter family for train/optimize; comparison model for evaluate.
    #[arg(long, value_parser = ["cvae", "vae-mdn", "cvae-mdn"])]
    baseline: Option<String>,
}

impl Common {
    fn experiment(&self) -> Result<Experiment> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Experiment::new(cfg)
    }

    fn kind(&self, default: ModelKind) -> Result<ModelKind> {
        self.baseline.as_deref().map_or(Ok(default), ModelKind::parse)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.verb {
        Verb::Generate(c) => generate(c),
        Verb::Train(c) => train(c),
        Verb::Optimize(c) => optimize(c),
        Verb::Evaluate(c) => evaluate(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Io(e.into()))?;
    writeln!(w)?;
    Ok(())
}

fn provenance(exp: &Experiment) -> serde_json::Value {
    json!({ "config_hash": exp.hash, "seed": exp.config.seed })
}

fn load_dataset(exp: &Experiment, out: &Path) -> Result<Vec<LabeledSample>> {
    let path = out.join("samples.bin");
    let (header, samples) = load_samples(&path)?;
    if header.config_hash != exp.hash {
        return Err(Error::format(
            &path,
            format!("written by config {} but running {}", header.config_hash, exp.hash),
        ));
    }
    Ok(samples)
}

fn generate(c: &Common) -> Result<()> {
    let exp = c.experiment()?;
    fs::create_dir_all(&c.out)?;
    let samples = exp.generate_dataset()?;
    let header = DatasetHeader {
        users: exp.scenario.users(),
        pbm_len: samples.first().map_or(0, |s| s.pbm.len()),
        config_hash: exp.hash.clone(),
        seed: exp.config.seed,
    };
    save_samples(&c.out.join("samples.bin"), &header, &samples)?;
    write_samples_csv(&mut create(&c.out.join("samples.csv"))?, &samples)?;
    let count = |s| samples.iter().filter(|x| x.split == s).count();
    write_json(
        &c.out.join("generate.json"),
        &json!({
            "provenance": provenance(&exp),
            "samples": samples.len(),
            "train": count(Split::Train),
            "validation": count(Split::Validation),
            "test": count(Split::Test),
            "pbm_len": header.pbm_len,
            "sampled_combos": exp.sampled.iter().map(|l| l + 1).collect::<Vec<_>>(),
        }),
    )
}

fn train(c: &Common) -> Result<()> {
    let exp = c.experiment()?;
    let kind = c.kind(ModelKind::CvaeMdn)?;
    let samples = load_dataset(&exp, &c.out)?;
    let (tr, va) = training_sets(&exp, &samples, exp.config.train_per_combo)?;
    let (bank, reports) = train_augmenter(&exp, kind, &tr, &va, exp.config.seed)?;
    let (mapper, mrep) = train_mapper(&exp, &tr, &va, exp.config.seed)?;
    bank.write(&mut create(&c.out.join("augmenter.bin"))?)?;
    mapper.write(&mut create(&c.out.join("mapper.bin"))?)?;

    let mut w = create(&c.out.join("augmenter_curve.csv"))?;
    writeln!(w, "model_combo,epoch,train_loss,validation_loss")?;
    for (combo, rep) in &reports {
        let tag = combo.map_or("all".to_string(), |l| (l + 1).to_string());
        for (e, t) in rep.train_loss.iter().enumerate() {
            let v = rep.validation_loss.get(e).copied().unwrap_or(f64::NAN);
            writeln!(w, "{tag},{},{t},{v}", e + 1)?;
        }
    }
    let mut w = create(&c.out.join("mapper_curve.csv"))?;
    writeln!(w, "epoch,train_rmse,validation_rmse")?;
    for (e, t) in mrep.train_rmse.iter().enumerate() {
        let v = mrep.validation_rmse.get(e).copied().unwrap_or(f64::NAN);
        writeln!(w, "{},{t},{v}", e + 1)?;
    }
    write_json(
        &c.out.join("train.json"),
        &json!({
            "provenance": provenance(&exp),
            "model": kind.tag(),
            "train_samples": tr.len(),
            "validation_samples": va.len(),
            "augmenter": reports.iter().map(|(combo, r)| json!({
                "combo": combo.map(|l| l + 1),
                "best_epoch": r.best_epoch.map(|e| e + 1),
                "best_validation_loss": r.best_validation_loss,
                "aborted": r.aborted,
            })).collect::<Vec<_>>(),
            "mapper": {
                "best_epoch": mrep.best_epoch.map(|e| e + 1),
                "best_validation_rmse": mrep.best_validation_rmse,
                "aborted": mrep.aborted,
            },
        }),
    )
}

fn load_models(out: &Path) -> Result<(AugmenterBank, RateMapperModel)> {
    let open = |name: &str| {
        let p = out.join(name);
        File::open(&p).map(BufReader::new).map_err(|_| Error::Missing(p))
    };
    let bank = AugmenterBank::read(&mut open("augmenter.bin")?)?;
    let mapper = RateMapperModel::read(&mut open("mapper.bin")?)?;
    Ok((bank, mapper))
}

fn write_mmd_rows(w: &mut impl Write, size: usize, tag: &str, values: &[Option<f64>]) -> Result<()> {
    for (l, v) in values.iter().enumerate() {
        if let Some(v) = v {
            writeln!(w, "{size},{tag},{},{v}", l + 1)?;
        }
    }
    Ok(())
}

fn optimize(c: &Common) -> Result<()> {
    let exp = c.experiment()?;
    let samples = load_dataset(&exp, &c.out)?;
    let (bank, mapper) = load_models(&c.out)?;
    if let Some(b) = &c.baseline {
        if ModelKind::parse(b)? != bank.kind {
            return Err(Error::Config(format!(
                "trained augmenter is {}, not {b}",
                bank.kind.tag()
            )));
        }
    }
    let (tr, _) = training_sets(&exp, &samples, exp.config.train_per_combo)?;
    let sel = select(&exp, &tr, &bank, &mapper, exp.config.seed)?;
    let means = true_means(&exp, &samples);
    let best_true = (0..means.len()).fold(0, |b, l| if means[l] > means[b] { l } else { b });

    let mut w = create(&c.out.join("fitness.csv"))?;
    writeln!(w, "combo_index,sampled,augmented,fitness,true_mean")?;
    for l in 0..exp.combinations() {
        writeln!(
            w,
            "{},{},{},{},{}",
            l + 1,
            sel.pool.sampled(l).len(),
            sel.pool.augmented(l).len(),
            fitness(&sel.pool, l)?,
            means[l]
        )?;
    }
    write_trace_csv(&mut create(&c.out.join("ga_trace.csv"))?, &sel.ga.trace)?;

    let transform = evaluation_transform(&samples)?;
    let test = test_pbms(&exp, &samples);
    let mmd = bank_mmd(&exp, &bank, &transform, &test, exp.config.seed)?;
    let mut w = create(&c.out.join("mmd.csv"))?;
    writeln!(w, "train_size,model_tag,combo_index,mmd")?;
    write_mmd_rows(&mut w, exp.config.train_per_combo, bank.kind.tag(), &mmd)?;

    let by_test = by_combo(&samples, Split::Test, exp.combinations());
    let mut w = create(&c.out.join("rate_cdf.csv"))?;
    writeln!(w, "combo_index,source,rate,cdf")?;
    for l in 0..exp.combinations() {
        let real: Vec<f64> = by_test[l].iter().map(|s| s.sum_rate).collect();
        for (source, rates) in [("real", &real), ("augmented", &sel.pool.augmented(l).to_vec())] {
            if rates.is_empty() {
                continue;
            }
            for (v, p) in empirical_cdf(rates)? {
                writeln!(w, "{},{source},{v},{p}", l + 1)?;
            }
        }
    }

    let ratio = means[sel.ga.best] / means[best_true];
    write_json(
        &c.out.join("selection.json"),
        &json!({
            "provenance": provenance(&exp),
            "model": bank.kind.tag(),
            "exhaustive_combo": sel.exhaustive + 1,
            "ga_combo": sel.ga.best + 1,
            "ga_fitness": sel.ga.fitness,
            "ga_initial_best_fitness": sel.ga.initial_best_fitness,
            "best_true_combo": best_true + 1,
            "selected_true_mean_ratio": ratio,
        }),
    )?;
    let mut w = create(&c.out.join("summary.txt"))?;
    writeln!(w, "config_hash {}", exp.hash)?;
    writeln!(w, "seed {}", exp.config.seed)?;
    writeln!(w, "model {}", bank.kind.tag())?;
    writeln!(w, "exhaustive_combo {}", sel.exhaustive + 1)?;
    writeln!(w, "ga_combo {}", sel.ga.best + 1)?;
    writeln!(w, "best_true_combo {}", best_true + 1)?;
    writeln!(w, "selected_true_mean_ratio {ratio:.4}")?;
    println!("selected combo {} (true-mean ratio {ratio:.4})", sel.ga.best + 1);
    Ok(())
}

fn evaluate(c: &Common) -> Result<()> {
    let exp = c.experiment()?;
    let baseline = c.kind(ModelKind::Cvae)?;
    let samples = load_dataset(&exp, &c.out)?;
    let transform = evaluation_transform(&samples)?;
    let test = test_pbms(&exp, &samples);

    let mut kinds = vec![ModelKind::CvaeMdn];
    if baseline != ModelKind::CvaeMdn {
        kinds.push(baseline);
    }
    let mut w = create(&c.out.join("mmd_sweep.csv"))?;
    writeln!(w, "train_size,model_tag,combo_index,mmd")?;
    let mut mean_rows = Vec::new();
    for &size in &exp.config.train_sizes {
        let (tr, va) = training_sets(&exp, &samples, size)?;
        for &kind in &kinds {
            let (bank, _) = train_augmenter(&exp, kind, &tr, &va, exp.config.seed)?;
            let mmd = bank_mmd(&exp, &bank, &transform, &test, exp.config.seed)?;
            write_mmd_rows(&mut w, size, kind.tag(), &mmd)?;
            let vals: Vec<f64> = mmd.iter().flatten().copied().collect();
            let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
            println!("train size {size} {}: mean MMD {mean:.5}", kind.tag());
            mean_rows.push(json!({ "train_size": size, "model": kind.tag(), "mean_mmd": mean }));
        }
    }
    w.flush()?;

    let means = true_means(&exp, &samples);
    let mut w = create(&c.out.join("true_means.csv"))?;
    writeln!(w, "combo_index,true_mean")?;
    for (l, m) in means.iter().enumerate() {
        writeln!(w, "{},{m}", l + 1)?;
    }
    let best = (0..means.len()).fold(0, |b, l| if means[l] > means[b] { l } else { b });
    let (compressed, full) = exp.compression_rates(best)?;
    write_json(
        &c.out.join("evaluate.json"),
        &json!({
            "provenance": provenance(&exp),
            "mean_mmd": mean_rows,
            "best_true_combo": best + 1,
            "compressed_rate": compressed,
            "full_sbf_rate": full,
            "compression_ratio": compressed / full,
        }),
    )?;
    println!("compression ratio {:.4}", compressed / full);
    Ok(())
}
