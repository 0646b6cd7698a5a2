//! Subcommand implementations and the run-directory layout:
//!
//! ```text
//! <run>/config.toml     resolved config snapshot
//! <run>/config.sha256   hash guarding --resume
//! <run>/run.json        corpus path
//! <run>/split.json      train/val/test ids
//! <run>/metrics.csv     one row per epoch
//! <run>/checkpoints/step{1,2,3}/
//! <run>/router.json     culture classifier over image embeddings
//! <run>/reports/<mode>-<router>.{csv,json}
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use recipe_debias::corpus::{
    build_multicultural_split, build_standard_split, build_zero_shot_split, generate_synthetic, load_corpus, write_corpus,
    Corpus, CorpusFormat, CorpusSplit, CultureTag, RecipeRecord, SplitProtocol,
};
use recipe_debias::debias::ScoreMode;
use recipe_debias::dictionaries::{build_dictionary, LabelKind};
use recipe_debias::eval::{
    render, route_and_evaluate, zero_shot_report, CultureClassifier, DenseScorer, EvalSpec, ReportFile, RoutePredictor,
    RouterMode, ZeroShotTable,
};
use recipe_debias::retrieval::{load_checkpoint, save_checkpoint, EpochRecord, PairData, Stage, TrainState};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

const STEPS: [&str; 3] = ["step1", "step2", "step3"];

#[derive(Serialize, Deserialize)]
struct RunInfo {
    corpus: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn json_out<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn json_in<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    serde_json::from_reader(open(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn protocol_name(p: SplitProtocol) -> &'static str {
    match p {
        SplitProtocol::Standard => "standard",
        SplitProtocol::ZeroShot => "zero-shot",
        SplitProtocol::Multicultural => "multicultural",
    }
}

fn refuse_existing(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Config(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

pub fn synth(config: &Path, out: &Path, force: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    refuse_existing(out, force)?;
    let corpus = generate_synthetic(&cfg.synthetic)?;
    let mut w = create(out)?;
    write_corpus(&mut w, &corpus.pairs)?;
    w.flush().map_err(|e| CliError::io(out, e))?;
    println!("wrote {} pairs to {}", corpus.pairs.len(), out.display());
    Ok(())
}

fn load(cfg: &RunConfig, path: &Path) -> Result<Corpus, CliError> {
    Ok(Corpus::new(load_corpus(path, CorpusFormat::JsonlV1, &cfg.schema())?)?)
}

fn make_split(cfg: &RunConfig, corpus: &Corpus) -> Result<CorpusSplit, CliError> {
    let s = &cfg.split;
    let split = match s.protocol {
        SplitProtocol::Standard => build_standard_split(corpus, cfg.fractions(), s.seed)?,
        SplitProtocol::Multicultural => {
            build_multicultural_split(corpus, cfg.fractions(), s.seed, s.dedup.then_some(s.seed ^ 0xd0d0))?
        }
        SplitProtocol::ZeroShot => build_zero_shot_split(corpus, &s.zero_shot_keywords, cfg.fractions(), s.seed)?,
    };
    Ok(split)
}

fn write_metrics(path: &Path, log: &[EpochRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in log {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn last_completed(run: &Path) -> Option<usize> {
    (0..STEPS.len())
        .rev()
        .find(|&i| run.join("checkpoints").join(STEPS[i]).join("state.json").exists())
}

pub fn train(config: &Path, corpus_path: &Path, out: &Path, force: bool, resume: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let hash = cfg.hash();
    let hash_path = out.join("config.sha256");
    let mut resumed = None;
    if out.exists() {
        if force {
            fs::remove_dir_all(out).map_err(|e| CliError::io(out, e))?;
        } else if resume {
            let stored = fs::read_to_string(&hash_path).map_err(|e| CliError::io(&hash_path, e))?;
            if stored.trim() != hash {
                return Err(CliError::Config(format!(
                    "config hash {hash} does not match the run's {}; refusing to resume",
                    stored.trim()
                )));
            }
            resumed = last_completed(out);
        } else {
            return Err(CliError::Config(format!(
                "run directory {} exists; pass --force to replace it or --resume to continue",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out.join("checkpoints")).map_err(|e| CliError::io(out, e))?;
    write_text(&out.join("config.toml"), &cfg.snapshot())?;
    write_text(&hash_path, &format!("{hash}\n"))?;
    let corpus_abs = fs::canonicalize(corpus_path).map_err(|e| CliError::io(corpus_path, e))?;
    json_out(&out.join("run.json"), &RunInfo { corpus: corpus_abs })?;

    let corpus = load(&cfg, corpus_path)?;
    let split = make_split(&cfg, &corpus)?;
    json_out(&out.join("split.json"), &split)?;

    let checkpoint = |i: usize| out.join("checkpoints").join(STEPS[i]);
    let mut state = match resumed {
        Some(i) => {
            info!("resuming after {}", STEPS[i]);
            load_checkpoint(&checkpoint(i), cfg.train)?
        }
        None => TrainState::new(cfg.train, &corpus)?,
    };
    let metrics = out.join("metrics.csv");
    if state.stage < Stage::Pretrained {
        state.pretrain(&corpus, &split)?;
        save_checkpoint(&state, &checkpoint(0))?;
        write_metrics(&metrics, &state.log)?;
    }
    if state.stage < Stage::DictionariesBuilt {
        state.build_dictionaries(&corpus, &split)?;
        save_checkpoint(&state, &checkpoint(1))?;
    }
    if state.stage < Stage::Finetuned {
        state.finetune(&corpus, &split)?;
        save_checkpoint(&state, &checkpoint(2))?;
    }
    write_metrics(&metrics, &state.log)?;

    let train = PairData::from_ids(&state.encoder, &corpus, &split.train)?;
    let labels: Vec<CultureTag> = train.cultures().into_iter().cloned().collect();
    let router = CultureClassifier::train(&state.embed_images(&train), &labels, &cfg.eval.router)?;
    router.save(create(&out.join("router.json"))?)?;

    let last = state.log.last();
    println!(
        "trained {} epochs into {} (final loss {:.4})",
        state.log.len(),
        out.display(),
        last.map_or(f64::NAN, |r| r.total)
    );
    Ok(())
}

pub struct EvalArgs {
    pub run: PathBuf,
    pub mode: Option<ScoreMode>,
    pub sizes: Option<Vec<usize>>,
    pub runs: Option<usize>,
    pub router: RouterMode,
    pub zero_shot: bool,
}

struct LoadedRun {
    cfg: RunConfig,
    corpus: Corpus,
    split: CorpusSplit,
}

fn load_run(run: &Path) -> Result<LoadedRun, CliError> {
    let cfg = RunConfig::load(&run.join("config.toml"))?;
    let info: RunInfo = json_in(&run.join("run.json"))?;
    let corpus = load(&cfg, &info.corpus)?;
    let split: CorpusSplit = json_in(&run.join("split.json"))?;
    split.validate(&corpus)?;
    Ok(LoadedRun { cfg, corpus, split })
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let LoadedRun { cfg, corpus, split } = load_run(&args.run)?;
    let step3 = args.run.join("checkpoints").join(STEPS[2]);
    if !step3.join("state.json").exists() {
        return Err(CliError::Runtime(format!("{} has no completed training", args.run.display())));
    }
    let state = load_checkpoint(&step3, cfg.train)?;
    let mode = args.mode.unwrap_or(cfg.train.scoring.mode);
    let spec = EvalSpec {
        protocol: protocol_name(split.protocol).into(),
        mode: mode.as_str().into(),
        sizes: args.sizes.clone().unwrap_or_else(|| cfg.eval.sizes.clone()),
        runs: args.runs.unwrap_or(cfg.eval.runs),
        seed: cfg.eval.seed,
    };
    let test = PairData::from_ids(&state.encoder, &corpus, &split.test)?;
    let router = match args.router {
        RouterMode::Oracle => None,
        RouterMode::Classifier => {
            let path = args.run.join("router.json");
            if !path.exists() {
                return Err(CliError::Runtime(format!("{} is missing; retrain the run", path.display())));
            }
            Some(CultureClassifier::load(open(&path)?)?)
        }
    };
    let (report, confusion) = route_and_evaluate(
        &state,
        &test,
        router.as_ref().map(|r| r as &dyn RoutePredictor),
        mode,
        &spec,
    )?;
    let mut file = ReportFile::new(report, spec.seed);
    file.confusion = confusion;
    if args.zero_shot {
        if split.excluded_keywords.is_empty() {
            return Err(CliError::Config("--zero-shot needs a run trained under the zero-shot protocol".into()));
        }
        let e_i = state.embed_images(&test);
        let scorer = DenseScorer {
            queries: state.queries(&e_i, &test.cultures(), mode)?,
            recipes: state.embed_recipes(&test),
        };
        let recipes: Vec<&RecipeRecord> = test.pairs.iter().map(|p| &p.recipe).collect();
        file.zero_shot.push(ZeroShotTable {
            mode: mode.as_str().into(),
            rows: zero_shot_report(&scorer, &recipes, &split.excluded_keywords)?,
        });
    }
    let dir = args.run.join("reports");
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let router_name = match args.router {
        RouterMode::Oracle => "oracle",
        RouterMode::Classifier => "classifier",
    };
    let stem = dir.join(format!("{}-{router_name}", mode.as_str()));
    let csv_path = stem.with_extension("csv");
    let json_path = stem.with_extension("json");
    file.write_csv(create(&csv_path)?)?;
    file.write_json(create(&json_path)?)?;
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

pub fn report(files: &[PathBuf]) -> Result<(), CliError> {
    let mut loaded = Vec::with_capacity(files.len());
    for f in files {
        let file = ReportFile::read_json(open(f)?).map_err(|e| CliError::Config(format!("{}: {e}", f.display())))?;
        loaded.push(file);
    }
    print!("{}", render(&loaded));
    Ok(())
}

pub fn build_dict(run: &Path, size: usize, kind: LabelKind, out: &Path, force: bool) -> Result<(), CliError> {
    if size == 0 {
        return Err(CliError::Config("--size must be at least 1".into()));
    }
    let LoadedRun { cfg, corpus, split } = load_run(run)?;
    let state = load_checkpoint(&run.join("checkpoints").join(STEPS[0]), cfg.train)?;
    let mut by_culture: BTreeMap<&CultureTag, Vec<&RecipeRecord>> = BTreeMap::new();
    for p in corpus.resolve_all(&split.train)? {
        by_culture.entry(&p.recipe.culture).or_default().push(&p.recipe);
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    for (culture, records) in by_culture {
        let path = out.join(format!("{culture}.{kind}.dict"));
        refuse_existing(&path, force)?;
        let dict = build_dictionary(&records, kind, size, &state.encoder)?;
        let mut w = create(&path)?;
        dict.write_to(&mut w)?;
        w.flush().map_err(|e| CliError::io(&path, e))?;
        println!("{culture}: {} {kind} entries -> {}", dict.size(), path.display());
    }
    Ok(())
}
