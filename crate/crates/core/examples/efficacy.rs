//! Trains every scoring mode on a synthetic corpus from one shared
//! pre-trained encoder and prints medR and R@1 per gallery size.
//!
//! Knobs come from environment variables: PAIRS, SEED, NOISE, PRE, FT, LR,
//! LCLS, LGEN, THR, MODES.

use std::time::Instant;

use recipe_debias::corpus::{build_multicultural_split, generate_synthetic, Corpus, SplitFractions, SyntheticConfig};
use recipe_debias::debias::ScoreMode;
use recipe_debias::eval::{evaluate, DenseScorer, Direction, EvalSpec};
use recipe_debias::retrieval::{PairData, TrainConfig, TrainState};

fn knob<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let synth = SyntheticConfig {
        n_pairs: knob("PAIRS", 2000),
        seed: knob("SEED", 7),
        noise_sigma: knob("NOISE", 0.15),
        ..Default::default()
    };
    let corpus = Corpus::new(generate_synthetic(&synth)?.pairs)?;
    let split = build_multicultural_split(&corpus, SplitFractions { train: 0.6, val: 0.1 }, 11, None)?;
    let mut config = TrainConfig::default();
    config.schedule.pretrain_epochs = knob("PRE", 10);
    config.schedule.finetune_epochs = knob("FT", 10);
    config.adam.learning_rate = knob("LR", 1e-3);
    config.scoring.lambda_cls = knob("LCLS", 1e-3);
    config.scoring.lambda_gen = knob("LGEN", 1e-3);
    config.debias.threshold = knob("THR", 0.5);
    config.ingredient_dict_size = 100;
    config.action_dict_size = 30;
    config.val_size = 0;

    let t = Instant::now();
    let mut base = TrainState::new(config, &corpus)?;
    base.pretrain(&corpus, &split)?;
    println!("pretrain {:.1}s", t.elapsed().as_secs_f64());
    let test = PairData::from_ids(&base.encoder, &corpus, &split.test)?;
    let modes: String = knob("MODES", "baseline,ingredient,action,both".to_string());
    for mode in modes.split(',').map(|m| m.parse::<ScoreMode>()).collect::<Result<Vec<_>, _>>()? {
        let t = Instant::now();
        let mut state = base.clone();
        state.config.scoring.mode = mode;
        state.build_dictionaries(&corpus, &split)?;
        state.finetune(&corpus, &split)?;
        let e_i = state.embed_images(&test);
        let scorer = DenseScorer {
            queries: state.queries(&e_i, &test.cultures(), mode)?,
            recipes: state.embed_recipes(&test),
        };
        let spec = EvalSpec {
            protocol: "synthetic".into(),
            mode: mode.as_str().into(),
            sizes: vec![250, 500, 1000, 2000],
            runs: 10,
            seed: 3,
        };
        let report = evaluate(&scorer, &spec, None)?;
        let cells: Vec<String> = spec
            .sizes
            .iter()
            .filter_map(|&s| report.mean_of(mode.as_str(), Direction::ImageToRecipe, s).map(|m| (s, m)))
            .map(|(s, m)| format!("{s}: medR {:.2} R@1 {:.2}", m.med_r, m.r1))
            .collect();
        let f1 = if mode.uses_classifier() {
            format!(" F1 {:.3}", state.ingredient_f1(&test)?)
        } else {
            String::new()
        };
        println!("{:<10} {}{f1} ({:.1}s)", mode.as_str(), cells.join(" | "), t.elapsed().as_secs_f64());
    }
    Ok(())
}
