use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use controlrec::augment::{build_registry, LiveSource, OfflineSource, PromptSource};
use controlrec::data::{
    default_triggers, generate_catalog, read_templates_jsonl, split_prompts, write_templates_jsonl, Catalog,
    PromptSplit, PromptTemplate,
};
use controlrec::eval::evaluate;
use controlrec::model::Checkpoint;
use controlrec::train::{StepRecord, TrainError, Trainer, TrainingSet};
use controlrec::verify;

use crate::config::RunConfig;
use crate::CliError;

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

/// Makes sure `dir` exists, creating it only when allowed.
pub fn ensure_dir(dir: &Path, create: bool) -> Result<(), CliError> {
    if dir.is_dir() {
        return Ok(());
    }
    if !create {
        return Err(CliError::Input(format!(
            "output directory {} does not exist (pass --create to make it)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let fail = |e: std::io::Error| CliError::Input(format!("cannot write {}: {e}", path.display()));
    let file = File::create(path).map_err(fail)?;
    let mut w = BufWriter::new(file);
    f(&mut w).map_err(fail)?;
    w.flush().map_err(fail)
}

fn open(path: &Path, what: &str) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Input(format!("{what} {}: {e}", path.display())))
}

pub fn load_catalog(cfg: &RunConfig) -> Result<Catalog, CliError> {
    let p = cfg.catalog_path();
    Catalog::read_jsonl(open(&p, "catalog")?).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
}

pub fn load_registry(cfg: &RunConfig) -> Result<Vec<PromptTemplate>, CliError> {
    let p = cfg.registry_path();
    read_templates_jsonl(open(&p, "prompt registry")?).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
}

pub fn gen_data(cfg: &RunConfig, create: bool) -> Result<(), CliError> {
    ensure_dir(&cfg.out_dir, create)?;
    let catalog = generate_catalog(&cfg.catalog, cfg.seed).map_err(input)?;
    let path = cfg.catalog_path();
    write_file(&path, |w| catalog.write_jsonl(w))?;
    println!(
        "wrote {}: {} users, {} items, {} interactions",
        path.display(),
        catalog.n_users(),
        catalog.n_items(),
        catalog.n_interactions()
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptMode {
    Offline,
    Live,
}

pub fn gen_prompts(cfg: &RunConfig, mode: PromptMode, create: bool) -> Result<(), CliError> {
    let p = &cfg.prompts;
    let mut live;
    let mut offline = OfflineSource;
    let source: &mut dyn PromptSource = match mode {
        PromptMode::Offline => &mut offline,
        PromptMode::Live => {
            let var = &p.client.token_env;
            if std::env::var(var).map_or(true, |t| t.trim().is_empty()) {
                return Err(CliError::Input(format!(
                    "live prompt generation needs an API token in the environment variable {var}"
                )));
            }
            live = LiveSource {
                config: p.client.clone(),
            };
            &mut live
        }
    };
    let triggers = match &p.triggers {
        Some(path) => read_templates_jsonl(open(path, "triggers file")?)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?,
        None => default_triggers(),
    };
    ensure_dir(&cfg.out_dir, create)?;
    let registry = build_registry(&triggers, p.per_group, source, cfg.seed).map_err(input)?;
    let registry = split_prompts(&registry, p.seen, p.zeroshot, cfg.seed).map_err(input)?;
    let path = cfg.registry_path();
    write_templates_jsonl(&registry, BufWriter::new(File::create(&path).map_err(input)?)).map_err(input)?;
    let count = |s| registry.iter().filter(|t| t.split == Some(s)).count();
    println!(
        "wrote {}: {} templates ({} seen, {} zero-shot)",
        path.display(),
        registry.len(),
        count(PromptSplit::Seen),
        count(PromptSplit::Zeroshot)
    );
    Ok(())
}

fn read_history(path: &Path, before: u64) -> Result<Vec<StepRecord>, CliError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (n, line) in open(path, "history")?.lines().enumerate() {
        let line = line.map_err(input)?;
        let r: StepRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::Input(format!("{} line {}: {e}", path.display(), n + 1)))?;
        if r.step < before {
            out.push(r);
        }
    }
    Ok(out)
}

fn write_history(path: &Path, records: &[StepRecord]) -> Result<(), CliError> {
    write_file(path, |w| {
        for r in records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CliError> {
    fs::write(path, ckpt.encode()).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("checkpoint {}: {e}", path.display())))?;
    Checkpoint::decode(&bytes).map_err(|e| CliError::Input(format!("checkpoint {}: {e}", path.display())))
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<(), CliError> {
    let catalog = load_catalog(cfg)?;
    let registry = load_registry(cfg)?;
    let data = TrainingSet::new(catalog, &registry, cfg.examples.clone()).map_err(input)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg.train.clone(), data, &load_checkpoint(p)?).map_err(input)?,
        None => Trainer::new(cfg.train.clone(), cfg.model.clone(), data).map_err(input)?,
    };
    let history_path = cfg.history_path();
    let mut history = if resume.is_some() {
        read_history(&history_path, trainer.step_index())?
    } else {
        Vec::new()
    };
    let interval = cfg.train.checkpoint_interval;
    if interval > 0 {
        ensure_dir(&cfg.checkpoint_dir(), true)?;
    }
    let start = Instant::now();
    while !trainer.is_done() {
        match trainer.step() {
            Ok(r) => {
                if r.step % 25 == 0 {
                    log::info!(
                        "step {} total {:.4} gen {:.4} hfm {:.4} icl {:.4}",
                        r.step,
                        r.total,
                        r.gen,
                        r.hfm,
                        r.icl
                    );
                }
                history.push(r);
            }
            Err(e @ TrainError::NonFinite { .. }) => {
                write_history(&history_path, &history)?;
                return Err(CliError::Numerical(e.to_string()));
            }
            Err(e) => return Err(input(e)),
        }
        let done = trainer.step_index();
        if interval > 0 && done % interval == 0 {
            save_checkpoint(
                &cfg.checkpoint_dir().join(format!("step-{done:06}.ckpt")),
                &trainer.checkpoint(),
            )?;
        }
    }
    write_history(&history_path, &history)?;
    save_checkpoint(&cfg.model_path(), &trainer.checkpoint())?;
    let last = history.last();
    println!(
        "trained {} steps in {:.1}s; final total loss {}; wrote {} and {}",
        trainer.step_index(),
        start.elapsed().as_secs_f64(),
        last.map_or("n/a".into(), |r| format!("{:.4}", r.total)),
        cfg.model_path().display(),
        history_path.display()
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig, split: PromptSplit, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let path = checkpoint.map_or_else(|| cfg.model_path(), Path::to_path_buf);
    let model = load_checkpoint(&path)?.to_model().map_err(input)?;
    let catalog = load_catalog(cfg)?;
    let registry = load_registry(cfg)?;
    let report = evaluate(&model, &catalog, &registry, split, &cfg.eval).map_err(|e| match e {
        controlrec::eval::EvalError::OutOfRange { .. } => CliError::Numerical(e.to_string()),
        other => input(other),
    })?;
    let out = cfg.eval_path(&split.to_string());
    write_file(&out, |w| report.write_jsonl(w))?;
    for line in report.summary_lines() {
        println!("{line}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn verify(seed: u64) -> Result<(), CliError> {
    let start = Instant::now();
    let results = verify::run_all(seed);
    for r in &results {
        println!(
            "{} {:<26} {:>6.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        );
    }
    println!("verify finished in {:.1}s", start.elapsed().as_secs_f64());
    match results.iter().find(|r| !r.passed) {
        Some(r) => Err(CliError::Verify(format!("{}: {}", r.name, r.detail))),
        None => Ok(()),
    }
}
