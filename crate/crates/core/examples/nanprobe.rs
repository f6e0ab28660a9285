//! Scratch: reproduce the preference-stage NaN and dump the steps before it.

use vidpref::augment::AugKind;
use vidpref::config::ExperimentConfig;
use vidpref::training::{
    run_preference, run_sft, AugmentationChoice, PreferenceData, TrainingError, TrainingMethod,
};
use vidpref::world::{build_training_set, generate_library};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(101);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3e-4);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(3);
    let beta: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let family = args.get(5).cloned().unwrap_or_else(|| "dvideo".into());

    let mut cfg = ExperimentConfig::with_seed(seed);
    cfg.videos = 24;
    cfg.train_examples = 1500;
    cfg.sft_epochs = 30;
    cfg.preference_learning_rate = lr;
    cfg.preference_epochs = epochs;
    cfg.beta = beta;
    let kind = match family.as_str() {
        "crop" => AugKind::Crop,
        "dclip" => AugKind::DClip,
        "dvideo" => AugKind::DVideo,
        "shuffle" => AugKind::Shuffle,
        "reverse" => AugKind::Reverse,
        "rate" => AugKind::Rate,
        "combination" => AugKind::Combination,
        other => panic!("unknown family {other}"),
    };
    let library = generate_library(&cfg.world(), cfg.world_seed()).unwrap();
    let rows =
        build_training_set(&library, cfg.train_examples, cfg.mix(), cfg.dataset_seed()).unwrap();
    let (sft, _) = run_sft(&library, &rows, &cfg.model(), &cfg.sft_training(), None).unwrap();
    let mut tcfg = cfg.preference_training(TrainingMethod::Vdpo).unwrap();
    tcfg.augmentation = Some(AugmentationChoice::Fixed(kind));
    match run_preference(&library, sft.clone(), PreferenceData::Online(&rows), &tcfg, None) {
        Ok((_, log)) => {
            let losses = log.losses();
            let n = losses.len();
            let tail = &losses[n.saturating_sub(5)..];
            println!("no abort; {n} steps, tail losses {tail:?}");
        }
        Err(TrainingError::Aborted { step, reason, log }) => {
            println!("abort at {step}: {reason}");
            for rec in log.steps.iter().rev().take(8).rev() {
                println!(
                    "step {} loss {:.6e} margin {:?} dist {:?}",
                    rec.step,
                    rec.loss,
                    rec.reward_margin,
                    rec.examples
                        .first()
                        .and_then(|e| e.candidates.first())
                        .map(|c| c.distance)
                );
            }
        }
        Err(e) => println!("other error: {e}"),
    }
}
