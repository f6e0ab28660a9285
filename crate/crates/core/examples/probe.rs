//! Scratch calibration probe for the mechanism criteria. Not part of the
//! deliverable; run with `cargo run -p vidpref --example probe --release`.

use std::time::Instant;

use vidpref::augment::{instantiate, oracle_reject_label, similarity_class, AugKind, RejectLabel, SimilarityClass};
use vidpref::benchmark::{build_suites, evaluate, Suite, SuiteScores, SuiteSizes};
use vidpref::config::ExperimentConfig;
use vidpref::rng::child_rng;
use vidpref::training::{
    run_preference, run_sft, AugmentationChoice, PreferenceData, RunLog, TrainingConfig,
    TrainingMethod,
};
use vidpref::world::{
    build_training_set, generate_library, slice_clip, ExampleRecord, QuestionKind,
};
use vidpref::augment::apply_augmentation;
use vidpref::world::generate_qa;
use rand::Rng;

/// Pair accuracy split by flavor: even pair slots are temporal (clip vs
/// reversed clip), odd slots are presence (two segments). Returns (temporal,
/// presence).
fn split_pairs(
    params: &vidpref::model::ModelParams,
    library: &vidpref::world::VideoLibrary,
    suite: &Suite,
) -> (f64, f64) {
    let hits: Vec<bool> = suite
        .items
        .iter()
        .map(|item| {
            vidpref::benchmark::predict_answer(params, library, item).unwrap()
                == item.answer_tokens
        })
        .collect();
    let mut t = (0usize, 0usize);
    let mut p = (0usize, 0usize);
    for (i, &(a, b)) in suite.pairs.iter().enumerate() {
        let bucket = if i % 2 == 0 { &mut t } else { &mut p };
        bucket.1 += 1;
        if hits[a] && hits[b] {
            bucket.0 += 1;
        }
    }
    (t.0 as f64 / t.1 as f64, p.0 as f64 / p.1 as f64)
}

/// Per-member accuracy of the halluc suite's four member roles: temporal
/// ordered, temporal reversed, presence first, presence second.
fn member_split(
    params: &vidpref::model::ModelParams,
    library: &vidpref::world::VideoLibrary,
    suite: &Suite,
) -> [f64; 4] {
    let mut acc = [(0usize, 0usize); 4];
    for (i, &(a, b)) in suite.pairs.iter().enumerate() {
        for (slot, idx) in [(0, a), (1, b)] {
            let role = if i % 2 == 0 { slot } else { 2 + slot };
            let item = &suite.items[idx];
            let hit = vidpref::benchmark::predict_answer(params, library, item).unwrap()
                == item.answer_tokens;
            acc[role].1 += 1;
            if hit {
                acc[role].0 += 1;
            }
        }
    }
    acc.map(|(h, n)| h as f64 / n.max(1) as f64)
}

fn final_half_pooled(logs: &[&RunLog]) -> (f64, f64) {
    let mut pool = Vec::new();
    for log in logs {
        let losses = log.losses();
        pool.extend_from_slice(&losses[losses.len() / 2..]);
    }
    let n = pool.len() as f64;
    let mean = pool.iter().sum::<f64>() / n;
    let var = pool.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn main() {
    let arg = |i: usize| std::env::args().nth(i);
    let seed: u64 = arg(1).and_then(|s| s.parse().ok()).unwrap_or(101);
    let pref_lr: f64 = arg(2).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let pref_epochs: usize = arg(3).and_then(|s| s.parse().ok()).unwrap_or(2);
    let videos: usize = arg(4).and_then(|s| s.parse().ok()).unwrap_or(12);
    let train_examples: usize = arg(5).and_then(|s| s.parse().ok()).unwrap_or(500);
    let sft_epochs: usize = arg(6).and_then(|s| s.parse().ok()).unwrap_or(50);
    let beta: f64 = arg(7).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let stages = arg(8).unwrap_or_else(|| "all".into());
    let stage_on = |name: &str| stages == "all" || stages.split(',').any(|s| s == name);
    let embed: usize = arg(9).and_then(|s| s.parse().ok()).unwrap_or(32);
    let heads: usize = arg(10).and_then(|s| s.parse().ok()).unwrap_or(2);
    let clip: f64 = arg(11).and_then(|s| s.parse().ok()).unwrap_or(10.0);
    let tf: f64 = arg(12).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let frames: usize = arg(13).and_then(|s| s.parse().ok()).unwrap_or(8);
    let length: usize = arg(14).and_then(|s| s.parse().ok()).unwrap_or(64);
    let t0 = Instant::now();
    let mut cfg = ExperimentConfig::with_seed(seed);
    cfg.preference_learning_rate = pref_lr;
    cfg.preference_epochs = pref_epochs;
    cfg.videos = videos;
    cfg.train_examples = train_examples;
    cfg.sft_epochs = sft_epochs;
    cfg.beta = beta;
    cfg.embed_dim = embed;
    cfg.n_heads = heads;
    cfg.halluc_pairs = 800;
    cfg.general_items = 800;
    cfg.temporal_fraction = tf;
    cfg.frames_per_clip = frames;
    cfg.video_length = length;
    println!(
        "seed {seed} pref lr {pref_lr} epochs {pref_epochs} videos {videos} rows {train_examples} sft_epochs {sft_epochs} beta {beta} embed {embed} heads {heads}"
    );
    let library = generate_library(&cfg.world(), cfg.world_seed()).unwrap();
    let eval_library = generate_library(&cfg.world_eval(), cfg.eval_world_seed()).unwrap();
    let rows =
        build_training_set(&library, cfg.train_examples, cfg.mix(), cfg.dataset_seed()).unwrap();
    let sizes = SuiteSizes { halluc_pairs: cfg.halluc_pairs, general_items: cfg.general_items };
    let (halluc, general) = build_suites(&eval_library, cfg.suite_seed(), sizes).unwrap();
    println!("[{:?}] world+data+suites built", t0.elapsed());

    let (sft, _sft_log) =
        run_sft(&library, &rows, &cfg.model(), &cfg.sft_training(), None).unwrap();
    println!("[{:?}] sft done", t0.elapsed());
    let ev = |p: &vidpref::model::ModelParams, s: &Suite| -> SuiteScores {
        evaluate(p, &eval_library, s).unwrap()
    };
    let sft_h = ev(&sft.policy, &halluc);
    let sft_g = ev(&sft.policy, &general);
    let (sft_t, sft_p) = split_pairs(&sft.policy, &eval_library, &halluc);
    println!(
        "seed {seed} SFT: halluc pair {:?} (temporal {sft_t:.4} presence {sft_p:.4}) item {:.4} general {:.4}  [{:?}]",
        sft_h.pair_accuracy, sft_h.item_accuracy, sft_g.item_accuracy, t0.elapsed()
    );
    if stage_on("anatomy") {
        let m = member_split(&sft.policy, &eval_library, &halluc);
        println!(
            "SFT eval members: t-ordered {:.4} t-reversed {:.4} p-first {:.4} p-second {:.4}",
            m[0], m[1], m[2], m[3]
        );
        let (tr_halluc, tr_general) =
            build_suites(&library, cfg.suite_seed().wrapping_add(1), sizes).unwrap();
        let th = evaluate(&sft.policy, &library, &tr_halluc).unwrap();
        let tg = evaluate(&sft.policy, &library, &tr_general).unwrap();
        let tm = member_split(&sft.policy, &library, &tr_halluc);
        println!(
            "SFT train-library: halluc pair {:?} general {:.4} | members t-ord {:.4} t-rev {:.4} p1 {:.4} p2 {:.4}",
            th.pair_accuracy, tg.item_accuracy, tm[0], tm[1], tm[2], tm[3]
        );
    }

    let mut base = cfg.preference_training(TrainingMethod::Vdpo).unwrap();
    base.max_grad_norm = Some(clip);
    let run_pref = |tcfg: &TrainingConfig, data: &[ExampleRecord]| {
        run_preference(&library, sft.clone(), PreferenceData::Online(data), tcfg, None).unwrap()
    };

    // criterion 7 analog: one fixed-family run each, pooled by group
    if stage_on("family") {
    let mut high_logs = Vec::new();
    let mut low_logs = Vec::new();
    for kind in AugKind::ALL {
        let mut tcfg = base.clone();
        tcfg.augmentation = Some(AugmentationChoice::Fixed(kind));
        let (_, log) = run_pref(&tcfg, &rows);
        let (fm, fv) = final_half_pooled(&[&log]);
        println!(
            "  family {kind:?} step0 {:.6} final-half mean {fm:.4} var {fv:.3e} [{:?}]",
            log.losses()[0],
            t0.elapsed()
        );
        match similarity_class(kind) {
            SimilarityClass::High => high_logs.push(log),
            SimilarityClass::Low => low_logs.push(log),
        }
    }
    let high_refs: Vec<&RunLog> = high_logs.iter().collect();
    let low_refs: Vec<&RunLog> = low_logs.iter().collect();
    let (hm, hv) = final_half_pooled(&high_refs);
    let (lm, lv) = final_half_pooled(&low_refs);
    println!("groups: high mean {hm:.6} var {hv:.3e} | low mean {lm:.6} var {lv:.3e} | low<high mean {} var {}", lm < hm, lv < hv);
    }

    // criterion 9 analog: shuffle on clean (temporal-only) vs size-matched mixed
    if stage_on("clean") {
    let (clean, mixed) = vidpref::benchmark::curate_clean(&rows, cfg.dataset_seed()).unwrap();
    let yes_frac = |rows: &[ExampleRecord]| {
        let yes = rows
            .iter()
            .filter(|r| r.answer_tokens.first() == Some(&vidpref::world::vocab::YES))
            .count();
        yes as f64 / rows.len() as f64
    };
    let ans_yes_rate = |p: &vidpref::model::ModelParams| {
        let mut yes = 0usize;
        let mut n = 0usize;
        for (i, &(a, b)) in halluc.pairs.iter().enumerate() {
            if i % 2 == 1 {
                for idx in [a, b] {
                    let item = &halluc.items[idx];
                    let ans =
                        vidpref::benchmark::predict_answer(p, &eval_library, item).unwrap();
                    n += 1;
                    if ans.first() == Some(&vidpref::world::vocab::YES) {
                        yes += 1;
                    }
                }
            }
        }
        yes as f64 / n as f64
    };
    println!(
        "clean rows yes-truth {:.4} | sft presence yes-rate {:.4}",
        yes_frac(&clean),
        ans_yes_rate(&sft.policy)
    );
    let mut shuffle_cfg = base.clone();
    shuffle_cfg.augmentation = Some(AugmentationChoice::Fixed(AugKind::Shuffle));
    let (clean_pair, _) = run_pref(&shuffle_cfg, &clean);
    let (mixed_pair, _) = run_pref(&shuffle_cfg, &mixed);
    let ch = ev(&clean_pair.policy, &halluc);
    let cg = ev(&clean_pair.policy, &general);
    let mh = ev(&mixed_pair.policy, &halluc);
    let mg = ev(&mixed_pair.policy, &general);
    let (ct, cp) = split_pairs(&clean_pair.policy, &eval_library, &halluc);
    let (mt, mp) = split_pairs(&mixed_pair.policy, &eval_library, &halluc);
    println!(
        "post-clean presence yes-rate {:.4} | post-mixed {:.4}",
        ans_yes_rate(&clean_pair.policy),
        ans_yes_rate(&mixed_pair.policy)
    );
    if stage_on("anatomy2") {
        let (tr_halluc, _) =
            build_suites(&library, cfg.suite_seed().wrapping_add(1), sizes).unwrap();
        let tm = member_split(&clean_pair.policy, &library, &tr_halluc);
        let em = member_split(&clean_pair.policy, &eval_library, &halluc);
        println!(
            "post-clean train members: t-ord {:.4} t-rev {:.4} p1 {:.4} p2 {:.4} | eval: t-ord {:.4} t-rev {:.4} p1 {:.4} p2 {:.4}",
            tm[0], tm[1], tm[2], tm[3], em[0], em[1], em[2], em[3]
        );
        // Truth-flipping shuffle items on the eval library: does the clean
        // contrast transfer to its own perturbation family?
        let mut srng = child_rng(seed, "shufitems", 0);
        let mut items = Vec::new();
        let f = eval_library.config.frames_per_clip;
        while items.len() < 400 {
            let video = &eval_library.videos
                [rand::Rng::gen_range(&mut srng, 0..eval_library.videos.len())];
            let start = rand::Rng::gen_range(&mut srng, 0..=video.length - f);
            let clip = slice_clip(&eval_library, video.video_id, start, f).unwrap();
            let Ok(qa) = generate_qa(&eval_library, &clip, QuestionKind::Temporal, &mut srng)
            else {
                continue;
            };
            let vidpref::world::TruthValue::Bool(t) = qa.meta.truth else { continue };
            let question = vidpref::world::parse_prompt(&eval_library.config, &qa.prompt).unwrap();
            let spec = instantiate(AugKind::Shuffle, &mut srng);
            let shuffled =
                apply_augmentation(&spec, &clip, &eval_library, &mut srng).unwrap();
            if vidpref::world::clip_truth(&shuffled, &question)
                != Some(vidpref::world::TruthValue::Bool(!t))
            {
                continue;
            }
            let flipped = vidpref::world::TruthValue::Bool(!t);
            let ex = vidpref::world::QAExample {
                prompt: qa.prompt.clone(),
                answer: vidpref::world::answer_tokens(&eval_library.config, &question, &flipped),
                meta: vidpref::world::QaMeta {
                    kind: QuestionKind::Temporal,
                    symbols: qa.meta.symbols.clone(),
                    truth: flipped,
                },
            };
            items.push(ExampleRecord::from_example(&shuffled, &ex));
        }
        let acc = |p: &vidpref::model::ModelParams| {
            let hit = items
                .iter()
                .filter(|r| {
                    vidpref::benchmark::predict_answer(p, &eval_library, r).unwrap()
                        == r.answer_tokens
                })
                .count();
            hit as f64 / items.len() as f64
        };
        println!(
            "shuffle-flip items (eval): sft {:.4} post-clean {:.4} post-mixed {:.4}",
            acc(&sft.policy),
            acc(&clean_pair.policy),
            acc(&mixed_pair.policy)
        );
    }
    println!(
        "clean: dH {:+.4} (dT {:+.4} dP {:+.4}) dG {:+.4} | mixed: dH {:+.4} (dT {:+.4} dP {:+.4}) dG {:+.4}  [{:?}]",
        ch.pair_accuracy.unwrap() - sft_h.pair_accuracy.unwrap(),
        ct - sft_t,
        cp - sft_p,
        cg.item_accuracy - sft_g.item_accuracy,
        mh.pair_accuracy.unwrap() - sft_h.pair_accuracy.unwrap(),
        mt - sft_t,
        mp - sft_p,
        mg.item_accuracy - sft_g.item_accuracy,
        t0.elapsed()
    );
    }

    // vdpo random (default) + pami N in {1,2,3}
    if stage_on("main") {
    let vdpo_cfg = base.clone();
    let (vdpo_pair, vdpo_log) = run_pref(&vdpo_cfg, &rows);
    let vh = ev(&vdpo_pair.policy, &halluc);
    let vg = ev(&vdpo_pair.policy, &general);
    let (vt, vp) = split_pairs(&vdpo_pair.policy, &eval_library, &halluc);
    println!(
        "vdpo(random): halluc {:.4} (d {:+.4}, dT {:+.4} dP {:+.4}) general {:.4} (d {:+.4}) step0 {:.6} [{:?}]",
        vh.pair_accuracy.unwrap(),
        vh.pair_accuracy.unwrap() - sft_h.pair_accuracy.unwrap(),
        vt - sft_t,
        vp - sft_p,
        vg.item_accuracy,
        vg.item_accuracy - sft_g.item_accuracy,
        vdpo_log.losses()[0],
        t0.elapsed()
    );

    let mut pami_stats = Vec::new();
    for n in [1usize, 2, 3] {
        let mut cfg_n = cfg.clone();
        cfg_n.method = TrainingMethod::Pami;
        cfg_n.candidates = n;
        let mut tcfg = cfg_n.preference_training(TrainingMethod::Pami).unwrap();
        tcfg.max_grad_norm = Some(clip);
        let (pair_n, log_n) = run_pref(&tcfg, &rows);
        let h = ev(&pair_n.policy, &halluc);
        let g = ev(&pair_n.policy, &general);
        // mean weight on oracle-true-rejected candidates
        let mut wsum = 0.0;
        let mut wn = 0usize;
        for step in &log_n.steps {
            for ex in &step.examples {
                for c in &ex.candidates {
                    if c.label == RejectLabel::TrueRejected {
                        wsum += c.weight;
                        wn += 1;
                    }
                }
            }
        }
        let (pt, pp) = split_pairs(&pair_n.policy, &eval_library, &halluc);
        println!(
            "pami N={n}: halluc {:.4} (d {:+.4}, dT {:+.4} dP {:+.4}) general {:.4} (d {:+.4}) mean_w_true {:.4} ({} cands) [{:?}]",
            h.pair_accuracy.unwrap(),
            h.pair_accuracy.unwrap() - sft_h.pair_accuracy.unwrap(),
            pt - sft_t,
            pp - sft_p,
            g.item_accuracy,
            g.item_accuracy - sft_g.item_accuracy,
            wsum / wn.max(1) as f64,
            wn,
            t0.elapsed()
        );
        pami_stats.push((n, h.pair_accuracy.unwrap()));
    }
    }

    if !stage_on("oracle") {
        println!("total [{:?}]", t0.elapsed());
        return;
    }
    // criterion 8 analog: oracle shuffle labels
    let mut rng = child_rng(seed, "probe", 0);
    let mut static_false = 0;
    let mut static_n = 0;
    let mut temporal_true = 0;
    let mut temporal_n = 0;
    let f = library.config.frames_per_clip;
    while static_n < 200 || temporal_n < 200 {
        let video = &library.videos[rng.gen_range(0..library.videos.len())];
        let start = rng.gen_range(0..=video.length - f);
        let clip = slice_clip(&library, video.video_id, start, f).unwrap();
        let kind =
            if temporal_n < 200 && rng.gen_bool(0.5) { QuestionKind::Temporal } else { QuestionKind::Static };
        let qa = match generate_qa(&library, &clip, kind, &mut rng) {
            Ok(qa) => qa,
            Err(_) => continue,
        };
        let spec = instantiate(AugKind::Shuffle, &mut rng);
        let augmented = apply_augmentation(&spec, &clip, &library, &mut rng).unwrap();
        let label = oracle_reject_label(&qa, &augmented, &library);
        match qa.meta.kind {
            QuestionKind::Static if static_n < 200 => {
                static_n += 1;
                if label == RejectLabel::FalseRejected {
                    static_false += 1;
                }
            }
            QuestionKind::Temporal if temporal_n < 200 => {
                temporal_n += 1;
                if label == RejectLabel::TrueRejected {
                    temporal_true += 1;
                }
            }
            _ => {}
        }
    }
    println!(
        "oracle shuffle: static false-rejected {}/{static_n}  temporal true-rejected {}/{temporal_n}",
        static_false, temporal_true
    );
    println!("total [{:?}]", t0.elapsed());
}
