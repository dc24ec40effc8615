use std::io::Write as _;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use mmtrust::analyze::{cooccurrence, corpus_cooccurrence, cross_apply, phi_coefficient};
use mmtrust::explain::{brute_force_shapley, summarize, tree_shap, Explainer, ShapMethod};
use mmtrust::featurize::featurize;
use mmtrust::forest::{evaluate_protocol, fit, fit_matrix, stratified_split, ForestConfig, Target, TrainingSet};
use mmtrust::stats::{rm_anova, score_table, RatingRecord, ITEMS};
use mmtrust::synth::{generate_dataset, DatasetOptions, OfflineGenerator, Preset};
use mmtrust::timeline::{compile, BehaviorTimeline, EventChannel, TimingConfig};
use mmtrust::transcript::{Piece, SegmentKind};
use mmtrust::{AugmentedTranscript, BehaviorLexicon, Channel, Corpus, Level, FEATURE_DIM};

const LOW_ABILITY: &str = "{f: confused} [thoughtful] Uh... {g: Arm Gesture (Left)} go left, yeah, follow the exit sign. {f: neutral} [short pause] It should be safe... QUICKLY.";
const HIGH_ABILITY: &str = "{f: confidence}{g: Arm Gesture (Left)}[thoughtful] Yes\u{2014}take the LEFT road. {g: Hard Head Nod}{f: neutral}It\u{2019}s safe, and it\u{2019}s your fastest way out... go now.";
const LOW_BENEVOLENCE: &str = "{f: confidence} {g: Arm Gesture (Left)} [thoughtful] Go left... it's safe. {f: neutral} {g: Head Nod Yes} [short pause] Move quickly.";
const HIGH_BENEVOLENCE: &str = "{f: confidence} {g: Arm Gesture (Left)} [thoughtful] Yes, take the LEFT road... it's safe and the quickest way out. {f: neutral} {g: Head Nod Yes} Keep moving carefully, you've got this.";

const ROWS: [&str; 4] = [LOW_ABILITY, HIGH_ABILITY, LOW_BENEVOLENCE, HIGH_BENEVOLENCE];

const SEED: u64 = 2024;

fn lex() -> &'static BehaviorLexicon {
    BehaviorLexicon::builtin()
}

fn names() -> Vec<String> {
    let v = lex().vocabulary();
    (0..v.len()).map(|i| v.name(i).to_string()).collect()
}

fn corpus(preset: Preset, seed: u64) -> Corpus {
    let generator = OfflineGenerator::for_preset(preset, seed, lex());
    generate_dataset(preset, &generator, lex(), &DatasetOptions::default(), None).unwrap()
}

fn idx(channel: Channel, name: &str) -> usize {
    lex().feature_index(channel, name).unwrap_or_else(|| panic!("{name} not in vocabulary"))
}

fn lexicon_fidelity() {
    let l = lex();
    assert_eq!(l.gestures().len(), 72);
    assert_eq!(l.facial().len(), 12);
    assert_eq!(l.audio().len(), 10);
    assert_eq!(l.vocabulary().len(), 94);
    assert_eq!(FEATURE_DIM, 94);
    let rows: [(&str, &str, f64); 12] = [
        ("Defeated", "The character raises their arms and left foot, then slams them against the ground.", 6.733),
        ("Joyful Jump", "The character jumps and bends their leg while raising their hands.", 1.867),
        ("Offensive Idle", "The character shakes their legs and arms.", 10.567),
        ("Clap", "The character claps their hands.", 2.067),
        ("Pointing Forward", "The character looks down, then points forward without punch.", 4.700),
        ("Thankful", "The character puts their right hand to their chest and leans a little.", 3.000),
        ("Dismissing Gesture", "The character makes a swiping hand gesture.", 3.267),
        ("Hard Head Nod", "The character makes a big head nod, emphasized with their hands.", 1.633),
        ("Shrugging", "The character lifts their shoulders and hands as if they do not know.", 2.000),
        ("Pointing", "The character points forward.", 2.767),
        ("Talking 3", "The character puts their palm up.", 3.767),
        ("Waving 2", "The character waves with both arms.", 3.167),
    ];
    for (name, description, duration) in rows {
        let g = l.gesture(name).unwrap_or_else(|| panic!("missing gesture {name}"));
        assert_eq!(g.name, name);
        assert_eq!(g.description, description, "{name}");
        assert_eq!(g.duration, duration, "{name}");
    }
    assert_eq!(l.gesture("Defeated").unwrap().duration_ms(), 6733);
    let mut seen = std::collections::HashSet::new();
    for e in l.vocabulary().entries() {
        assert!(seen.insert((e.channel, e.name.clone())), "duplicate {}", e.name);
    }
}

fn expected_counts(row: usize) -> Vec<u32> {
    let f = |n| idx(Channel::Facial, n);
    let g = |n| idx(Channel::Gesture, n);
    let a = |n| idx(Channel::Audio, n);
    let present = match row {
        0 => vec![f("confused"), a("thoughtful"), g("Arm Gesture (Left)"), f("neutral"), a("pause")],
        1 => vec![f("confident"), g("Arm Gesture (Left)"), a("thoughtful"), g("Hard Head Nod"), f("neutral")],
        2 => vec![
            f("confident"),
            g("Arm Gesture (Left)"),
            a("thoughtful"),
            f("neutral"),
            g("Head Nod Yes"),
            a("pause"),
        ],
        _ => vec![f("confident"), g("Arm Gesture (Left)"), a("thoughtful"), f("neutral"), g("Head Nod Yes")],
    };
    let mut v = vec![0; FEATURE_DIM];
    for i in present {
        v[i] += 1;
    }
    v
}

fn text_piece() -> impl Strategy<Value = Piece> {
    "[a-zA-Z0-9 ,.!?'\u{2019}\u{2014}\u{e9}\u{4e2d}-]{1,24}".prop_map(Piece::Text)
}

fn tag_name(names: Vec<String>) -> impl Strategy<Value = String> {
    prop_oneof![
        3 => proptest::sample::select(names),
        1 => "[a-zA-Z][a-zA-Z0-9 ()]{0,15}",
    ]
}

fn raw_tag() -> impl Strategy<Value = (Piece, String)> {
    let l = lex();
    let gestures: Vec<String> = l.gestures().iter().map(|g| g.name.clone()).collect();
    let facial: Vec<String> = l.facial().iter().map(|f| f.name.clone()).collect();
    let audio: Vec<String> = l.audio().iter().map(|a| a.name.clone()).collect();
    let pad = || "[ ]{0,2}";
    prop_oneof![
        (tag_name(gestures), pad(), pad())
            .prop_map(|(n, a, b)| (Piece::Gesture(n.clone()), format!("{{g:{a}{n}{b}}}"))),
        (tag_name(facial), pad(), pad())
            .prop_map(|(n, a, b)| (Piece::Facial(n.clone()), format!("{{f:{a}{n}{b}}}"))),
        (tag_name(audio), pad(), pad())
            .prop_map(|(n, a, b)| (Piece::Audio(n.clone()), format!("[{a}{n}{b}]"))),
    ]
}

fn grammar() {
    for (i, row) in ROWS.iter().enumerate() {
        let t = AugmentedTranscript::parse(row).unwrap();
        assert_eq!(t.serialize(), *row);
        let f = featurize(&t, lex());
        assert!(f.unknown.is_empty(), "row {i}: {:?}", f.unknown);
        assert_eq!(f.vector.counts(), expected_counts(i).as_slice(), "row {i}");
    }

    let segment = prop_oneof![
        text_piece().prop_map(|p| {
            let Piece::Text(s) = &p else { unreachable!() };
            (p.clone(), s.clone())
        }),
        raw_tag(),
    ];
    let transcript = proptest::collection::vec(segment, 0..16);
    let mut runner = TestRunner::new_with_rng(
        Config {
            cases: 10_000,
            failure_persistence: None,
            ..Config::default()
        },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    runner
        .run(&transcript, |parts| {
            let source: String = parts.iter().map(|(_, raw)| raw.as_str()).collect();
            let t = AugmentedTranscript::parse(&source).expect("generated transcript parses");
            prop_assert_eq!(t.serialize(), source.clone());
            let expected: Vec<(SegmentKind, String)> = parts
                .iter()
                .filter_map(|(p, _)| match p {
                    Piece::Text(_) => None,
                    Piece::Facial(n) => Some((SegmentKind::FacialTag, n.trim().to_string())),
                    Piece::Gesture(n) => Some((SegmentKind::GestureTag, n.trim().to_string())),
                    Piece::Audio(n) => Some((SegmentKind::AudioTag, n.trim().to_string())),
                })
                .collect();
            let found: Vec<(SegmentKind, String)> =
                t.tags().map(|s| (s.kind, s.payload.clone())).collect();
            prop_assert_eq!(found, expected);
            let canonical: Vec<Piece> = parts.into_iter().map(|(p, _)| p).collect();
            let rebuilt = AugmentedTranscript::from_pieces(&canonical).unwrap();
            let f = featurize(&t, lex());
            let g = featurize(&rebuilt, lex());
            prop_assert_eq!(&f.vector, &g.vector);
            prop_assert_eq!(
                f.vector.l1() as usize + f.unknown.len(),
                t.tags().count()
            );
            Ok(())
        })
        .unwrap();
}

fn forest_protocol() {
    let c = corpus(Preset::NeutralAbility, SEED);
    assert_eq!(c.len(), 2000);
    let samples: Vec<_> = c.samples.iter().collect();
    let cfg = ForestConfig {
        seed: SEED,
        ..Default::default()
    };
    let report = evaluate_protocol(&samples, Target::Level, &cfg, 20).unwrap();
    println!("      {}", report.headline());
    assert_eq!(report.accuracies.len(), 20);
    assert!(report.mean >= 0.99, "mean accuracy {}", report.mean);
    let headline = report.headline();
    assert!(headline.starts_with("mean accuracy ") && headline.contains("[95% CI: "));

    let mut shuffled = c.clone();
    let mut levels: Vec<Option<Level>> = shuffled.samples.iter().map(|s| s.level).collect();
    levels.shuffle(&mut ChaCha8Rng::seed_from_u64(SEED));
    for (s, l) in shuffled.samples.iter_mut().zip(levels) {
        s.level = l;
    }
    let mut counts = [0usize; 3];
    for s in &shuffled.samples {
        counts[s.level.unwrap() as usize] += 1;
    }
    let majority = *counts.iter().max().unwrap() as f64 / shuffled.len() as f64;
    let samples: Vec<_> = shuffled.samples.iter().collect();
    let noise = evaluate_protocol(&samples, Target::Level, &cfg, 20).unwrap();
    println!("      shuffled: {} (majority rate {:.2}%)", noise.headline(), majority * 100.0);
    assert!(
        (noise.mean - majority).abs() <= 0.05,
        "shuffled accuracy {} vs majority {majority}",
        noise.mean
    );
}

fn random_forest(rng: &mut ChaCha8Rng) -> (mmtrust::forest::Forest, Vec<Vec<u32>>) {
    let d = rng.random_range(2..=12);
    let n = rng.random_range(20..=60);
    let k = rng.random_range(2..=3);
    let rows: Vec<Vec<u32>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(0..4)).collect())
        .collect();
    let y: Vec<usize> = rows
        .iter()
        .map(|r| if rng.random_bool(0.7) { (r[0] as usize + r[d - 1] as usize) % k } else { rng.random_range(0..k) })
        .collect();
    let data = TrainingSet {
        x: rows.iter().map(Vec::as_slice).collect(),
        y,
        n_classes: k,
    };
    let cfg = ForestConfig {
        n_trees: rng.random_range(1..=5),
        max_depth: Some(rng.random_range(1..=3)),
        max_features: Some(rng.random_range(1..=d)),
        seed: rng.random(),
        ..Default::default()
    };
    let labels = (0..k).map(|i| format!("c{i}")).collect();
    (fit_matrix(&data, labels, &cfg).unwrap(), rows)
}

fn shap_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (forest, rows) = random_forest(&mut rng);
        assert!(forest.trees.len() <= 5);
        assert!(forest.trees.iter().all(|t| t.depth() <= 3));
        assert!(forest.n_features <= 12);
        let background: Vec<&[u32]> = rows.iter().take(25).map(Vec::as_slice).collect();
        for x in rows.iter().rev().take(3) {
            for method in [ShapMethod::PathDependent, ShapMethod::Interventional] {
                let fast = match method {
                    ShapMethod::PathDependent => tree_shap(&forest, "x", x, &background).unwrap(),
                    ShapMethod::Interventional => Explainer::new(&forest, &background, method)
                        .unwrap()
                        .explain("x", x)
                        .unwrap(),
                };
                let slow = brute_force_shapley(&forest, "x", x, &background, method).unwrap();
                for (a, b) in fast.phi.iter().flatten().zip(slow.phi.iter().flatten()) {
                    worst = worst.max((a - b).abs());
                }
                for (r, v) in fast.reconstruct().iter().zip(forest.vote_fractions(x)) {
                    assert!((r - v).abs() <= 1e-9);
                }
            }
        }
    }
    println!("      tree_shap vs brute force: max |diff| {worst:.1e}");
    assert!(worst <= 1e-9, "tree_shap differs from brute force by {worst}");

    let c = corpus(Preset::NeutralAbility, SEED);
    let generator = OfflineGenerator::for_preset(Preset::NeutralAbility, SEED, lex());
    let samples: Vec<_> = c.samples.iter().collect();
    let y: Vec<usize> = samples.iter().map(|s| s.level.unwrap() as usize).collect();
    let (train, test) = stratified_split(&y, 3, 0.2, &mut ChaCha8Rng::seed_from_u64(SEED)).unwrap();
    let train_samples: Vec<_> = train.iter().map(|&i| samples[i]).collect();
    let cfg = ForestConfig {
        seed: SEED,
        ..Default::default()
    };
    let forest = fit(&train_samples, Target::Level, &cfg, &lex().vocabulary().fingerprint()).unwrap();
    let background: Vec<&[u32]> = train_samples.iter().map(|s| s.features.counts()).collect();
    let explainer = Explainer::new(&forest, &background, ShapMethod::PathDependent).unwrap();
    let inputs: Vec<(&str, &[u32])> = test
        .iter()
        .map(|&i| (samples[i].turn_id.as_str(), samples[i].features.counts()))
        .collect();
    let attrs = explainer.explain_batch(&inputs).unwrap();
    let mut worst = 0.0f64;
    for (a, (_, x)) in attrs.iter().zip(&inputs) {
        for (r, v) in a.reconstruct().iter().zip(forest.vote_fractions(x)) {
            worst = worst.max((r - v).abs());
        }
    }
    println!("      local accuracy on {} test samples: max error {worst:.1e}", attrs.len());
    assert!(worst <= 1e-9);

    let xs: Vec<&[u32]> = inputs.iter().map(|(_, x)| *x).collect();
    let summary = summarize(&attrs, &xs, &forest.labels, &names(), ShapMethod::PathDependent);
    for &level in Level::ALL {
        let sig = generator.profile().level_signature(level).unwrap();
        let top = summary.top(level as usize, sig.len() + 2);
        for &f in sig {
            let hit = top.iter().find(|r| r.index == f);
            let name = lex().vocabulary().name(f);
            let hit = hit.unwrap_or_else(|| panic!("{level}: {name} not in top {}", sig.len() + 2));
            assert!(
                hit.direction.is_some_and(|d| d > 0.0),
                "{level}: {name} direction {:?}",
                hit.direction
            );
        }
    }
}

fn cross_application() {
    let gendered = corpus(Preset::GenderAbility, SEED);
    let neutral = corpus(Preset::NeutralAbility, SEED + 1);
    let samples: Vec<_> = gendered.samples.iter().collect();
    let cfg = ForestConfig {
        seed: SEED,
        ..Default::default()
    };
    let forest = fit(&samples, Target::Gender, &cfg, &gendered.vocabulary).unwrap();
    let report = cross_apply(&forest, &neutral, "GenderAbility", "NeutralAbility").unwrap();
    print!("{}", indent(&report.render()));
    assert_eq!(report.total, neutral.len());
    assert_eq!(report.counts.iter().sum::<usize>(), neutral.len());
    assert!((report.percentages.iter().sum::<f64>() - 100.0).abs() < 1e-9);
    assert_eq!(report.stratum_field.as_deref(), Some("level"));
    assert_eq!(report.strata.len(), 3);
    assert_eq!(report.strata.iter().map(|r| r.n).sum::<usize>(), neutral.len());
    for (c, total) in report.counts.iter().enumerate() {
        assert_eq!(report.strata.iter().map(|r| r.counts[c]).sum::<usize>(), *total);
    }
    for r in &report.strata {
        assert_eq!(r.counts.iter().sum::<usize>(), r.n);
        assert!((r.percentages.iter().sum::<f64>() - 100.0).abs() < 1e-9);
    }
    let text = report.render();
    assert!(text.contains("% classified as Male") && text.contains("by level:"));
}

fn cooccurrence_check() {
    let c = corpus(Preset::NeutralAbility, SEED);
    let report = corpus_cooccurrence(&c, &names(), 1).unwrap();
    let (h, w) = (idx(Channel::Audio, "hesitant"), idx(Channel::Audio, "whisper"));
    assert_eq!(report.phi[h][w], Some(1.0));
    let first = &report.ranked[0];
    println!("      top pair: {} / {} phi {}", first.name_a, first.name_b, first.phi);
    assert_eq!((first.a.min(first.b), first.a.max(first.b)), (h.min(w), h.max(w)));
    assert_eq!(first.phi, 1.0);

    let n = 2000;
    let d = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let rates: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..0.6)).collect();
    let rows: Vec<Vec<u32>> = (0..n)
        .map(|_| rates.iter().map(|&p| rng.random_bool(p) as u32).collect())
        .collect();
    let views: Vec<&[u32]> = rows.iter().map(Vec::as_slice).collect();
    let tag_names: Vec<String> = (0..d).map(|i| format!("t{i}")).collect();
    let report = cooccurrence(&views, &tag_names, 0).unwrap();
    let bound = 3.0 / (n as f64).sqrt();
    let mut within = 0;
    let mut pairs = 0;
    for i in 0..d {
        for j in i + 1..d {
            let phi = report.phi[i][j].unwrap();
            let check = phi_coefficient(n, report.joint[i][j], report.presence[i], report.presence[j]).unwrap();
            assert_eq!(phi, check);
            pairs += 1;
            within += (phi.abs() <= bound) as usize;
        }
    }
    println!("      independent tags: {within}/{pairs} pairs with |phi| <= {bound:.4}");
    assert!(within as f64 >= 0.95 * pairs as f64);
}

fn timeline_check() {
    let cfg = TimingConfig::default();
    for row in ROWS {
        let t = AugmentedTranscript::parse(row).unwrap();
        let tl = compile(&t, lex(), &cfg).unwrap();
        assert_eq!(tl.events.len() + tl.drops.len(), t.tags().count(), "{row}");
        assert!(tl.drops.is_empty(), "{:?}", tl.drops);
        for (channel, kind) in [
            (EventChannel::Gesture, SegmentKind::GestureTag),
            (EventChannel::Face, SegmentKind::FacialTag),
            (EventChannel::Voice, SegmentKind::AudioTag),
        ] {
            assert_eq!(tl.count(channel), t.tags().filter(|s| s.kind == kind).count());
        }
    }
    let low = compile(&AugmentedTranscript::parse(LOW_ABILITY).unwrap(), lex(), &cfg).unwrap();
    assert_eq!(low.events.len(), 5);

    let t = AugmentedTranscript::parse("{g: Defeated}{g: Clap} We will get through this.").unwrap();
    let tl = compile(&t, lex(), &cfg).unwrap();
    let clap = tl.events.iter().find(|e| e.name == "Clap").unwrap();
    assert_eq!(clap.start_ms, 6733);
    assert_eq!(clap.start(), 6.733);

    let dir = tempfile::tempdir().unwrap();
    for (i, row) in ROWS.iter().enumerate() {
        let tl = compile(&AugmentedTranscript::parse(row).unwrap(), lex(), &cfg).unwrap();
        let a = dir.path().join(format!("a{i}.json"));
        let b = dir.path().join(format!("b{i}.json"));
        tl.export(&a).unwrap();
        let back = BehaviorTimeline::import(&a).unwrap();
        assert_eq!(back, tl);
        back.export(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}

fn oracle_data() -> Vec<Vec<f64>> {
    vec![
        vec![-1.0, 0.5, 1.0],
        vec![-0.5, 1.0, 1.5],
        vec![0.0, 0.5, 0.5],
        vec![-1.5, 0.0, 1.0],
        vec![-0.5, 1.5, 1.0],
        vec![0.5, 1.0, 2.0],
    ]
}

fn close(a: f64, b: f64, what: &str) {
    assert!((a - b).abs() <= 1e-6, "{what}: {a} vs {b}");
}

fn stats_check() {
    let r = rm_anova(&oracle_data()).unwrap();
    close(r.f.unwrap(), 22.88732394366201, "F");
    close(r.p.unwrap(), 0.00018527456998852925, "p");
    assert_eq!((r.df_num, r.df_den), (2.0, 10.0));
    let m = r.mauchly.as_ref().unwrap();
    close(m.w, 0.9640944257091842, "Mauchly W");
    close(m.chi_square, 0.1462641487523674, "Mauchly chi2");
    close(m.p, 0.9294780616835218, "Mauchly p");
    close(r.gg_epsilon.unwrap(), 0.9653389505936424, "GG epsilon");
    let oracle = [
        (0, 1, -1.25, -5.0, 0.01231414794016),
        (0, 2, -1.6666666666666667, -5.976143046671969, 0.005638005793840794),
        (1, 2, -0.4166666666666667, -1.7460757394239457, 0.4237043195287846),
    ];
    for (c, (a, b, diff, t, p)) in r.pairwise.iter().zip(oracle) {
        assert_eq!((c.a, c.b), (a, b));
        close(c.mean_difference, diff, "mean difference");
        close(c.t.unwrap(), t, "t");
        close(c.p_bonferroni.unwrap(), p, "Bonferroni p");
    }

    let shifted: Vec<Vec<f64>> = oracle_data()
        .into_iter()
        .map(|row| row.into_iter().map(|v| v + 7.0).collect())
        .collect();
    let s = rm_anova(&shifted).unwrap();
    close(s.f.unwrap(), r.f.unwrap(), "shifted F");

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut records = Vec::new();
    for (block, participants) in [("Ability", 0..30), ("Benevolence", 30..60)] {
        for p in participants {
            for &level in Level::ALL {
                for (item, _) in ITEMS {
                    let centre = level as i8 - 1;
                    records.push(RatingRecord {
                        participant: format!("p{p:02}"),
                        block: Some(block.to_string()),
                        condition: level,
                        item: item.to_string(),
                        response: (centre + rng.random_range(-1..=1)).clamp(-2, 2),
                    });
                }
            }
        }
    }
    let table = score_table(&records).unwrap();
    let labels: Vec<&str> = table.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(
        labels,
        [
            "ability_knowledge",
            "ability_capable",
            "Mean Ability",
            "benevolence_help",
            "benevolence_needs",
            "Mean Benevolence",
            "trust_follow",
            "human_behavior",
        ]
    );
    let columns: Vec<(Option<&str>, Level)> = table.columns.iter().map(|(b, l)| (b.as_deref(), *l)).collect();
    let mut expected = Vec::new();
    for b in ["Ability", "Benevolence"] {
        for &l in Level::ALL {
            expected.push((Some(b), l));
        }
    }
    assert_eq!(columns, expected);
    for row in &table.rows {
        assert_eq!(row.values.len(), 6);
    }
    let mean_ability = table.value("Mean Ability", Some("Ability"), Level::Low).unwrap();
    let items = (table.value("ability_knowledge", Some("Ability"), Level::Low).unwrap()
        + table.value("ability_capable", Some("Ability"), Level::Low).unwrap())
        / 2.0;
    close(mean_ability, items, "Mean Ability aggregate");
    let text = table.render();
    print!("{}", indent(&text));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2 + 8);
    assert!(lines[0].contains("Ability") && lines[0].contains("Benevolence"));
    assert_eq!(lines[1].matches("Low").count(), 2);
    assert_eq!(lines[1].matches("Medium").count(), 2);
    assert_eq!(lines[1].matches("High").count(), 2);
}

fn digest(s: &str) -> String {
    let h = Sha256::digest(s.as_bytes());
    h.iter().map(|b| format!("{b:02x}")).collect()
}

fn pipeline(threads: usize) -> Vec<(&'static str, String)> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let c = corpus(Preset::NeutralAbility, SEED);
        let samples: Vec<_> = c.samples.iter().collect();
        let cfg = ForestConfig {
            seed: SEED,
            ..Default::default()
        };
        let report = evaluate_protocol(&samples, Target::Level, &cfg, 5).unwrap();
        let forest = fit(&samples, Target::Level, &cfg, &c.vocabulary).unwrap();
        let xs: Vec<&[u32]> = samples.iter().map(|s| s.features.counts()).collect();
        let explainer = Explainer::new(&forest, &xs, ShapMethod::PathDependent).unwrap();
        let inputs: Vec<(&str, &[u32])> = samples
            .iter()
            .take(200)
            .map(|s| (s.turn_id.as_str(), s.features.counts()))
            .collect();
        let attrs = explainer.explain_batch(&inputs).unwrap();
        let shap = summarize(&attrs, &xs[..200], &forest.labels, &names(), ShapMethod::PathDependent);
        let cooc = corpus_cooccurrence(&c, &names(), 5).unwrap();
        let g = corpus(Preset::GenderAbility, SEED);
        let g_samples: Vec<_> = g.samples.iter().collect();
        let g_forest = fit(&g_samples, Target::Gender, &cfg, &g.vocabulary).unwrap();
        let applied = cross_apply(&g_forest, &c, "GenderAbility", "NeutralAbility").unwrap();
        let tl = compile(
            &AugmentedTranscript::parse(&c.samples[0].raw).unwrap(),
            lex(),
            &TimingConfig::default(),
        )
        .unwrap();
        vec![
            ("corpus", c.to_jsonl()),
            ("model", forest.to_json()),
            ("eval report", report.render() + &report.to_json()),
            ("shap summary", shap.to_table() + &shap.to_json()),
            ("cooccurrence", cooc.render(20) + &cooc.to_json()),
            ("cross-apply", applied.render() + &applied.to_json()),
            ("timeline", tl.to_json()),
        ]
    })
}

fn determinism() {
    let a = pipeline(1);
    let b = pipeline(3);
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        assert!(x == y, "{name} differs between runs");
        println!("      {name:<13} sha256 {}", &digest(x)[..16]);
    }
}

fn indent(text: &str) -> String {
    text.lines().map(|l| format!("      {l}\n")).collect()
}

type Criterion = (&'static str, fn(), Option<Duration>);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("lexicon fidelity", lexicon_fidelity, Some(Duration::from_secs(1))),
        ("grammar round-trip", grammar, Some(Duration::from_secs(10))),
        ("forest protocol", forest_protocol, Some(Duration::from_secs(60))),
        ("SHAP correctness", shap_correctness, Some(Duration::from_secs(60))),
        ("cross-application", cross_application, None),
        ("co-occurrence", cooccurrence_check, None),
        ("timeline", timeline_check, None),
        ("statistics", stats_check, None),
        ("determinism", determinism, None),
    ];
    panic::set_hook(Box::new(|info| {
        let msg = info
            .payload()
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| info.payload().downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        let at = info.location().map(|l| format!(" at {}:{}", l.file(), l.line())).unwrap_or_default();
        eprintln!("      panic: {msg}{at}");
    }));
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check));
        let elapsed = start.elapsed();
        let over = budget.filter(|b| elapsed > *b);
        let verdict = match (&outcome, over) {
            (Ok(()), None) => "PASS",
            _ => "FAIL",
        };
        if verdict == "FAIL" {
            failed += 1;
        }
        let budget_note = match (budget, over) {
            (Some(b), Some(_)) => format!(", over the {}s budget", b.as_secs()),
            (Some(b), None) => format!(", budget {}s", b.as_secs()),
            (None, _) => String::new(),
        };
        println!("{verdict} criterion {} {name} ({:.2}s{budget_note})", i + 1, elapsed.as_secs_f64());
        let _ = std::io::stdout().flush();
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
