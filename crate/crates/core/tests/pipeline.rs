use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xvoice::cfm::SolverConfig;
use xvoice::field_net::{train_stage1, train_stage2, Checkpoint, TrainConfig};
use xvoice::guidance::GuidanceConfig;
use xvoice::infill::Stage;
use xvoice::pairs::{make_pairs, PairConfig};
use xvoice::toy::{gen_corpus, ToyWorld, WorldSpec};

#[test]
fn stage1_pairs_keep_the_speaker_and_feed_stage2() {
    let world = ToyWorld::new(WorldSpec::default()).unwrap();
    let corpus = gen_corpus(&world, 120, 60).unwrap();
    let vocab = world.vocabulary();
    let utts: Vec<_> = corpus
        .train
        .iter()
        .map(|c| world.train_utterance(c, &vocab).unwrap())
        .collect();
    let cfg = TrainConfig {
        steps: 800,
        warmup_steps: 80,
        seed: 5,
        ..Default::default()
    };
    let init = Checkpoint::init(vocab, world.language_table(), world.spec.feat_dim, true, 5);
    let (s1, log) = train_stage1(&init, &utts, &cfg).unwrap();
    assert!(log.eval_final < log.eval_initial);

    let pc = PairConfig {
        per_lang_budget_hours: 0.01,
        guidance: GuidanceConfig::default(),
        solver: SolverConfig::default(),
        seed: 11,
        jobs: 1,
    };
    let pairs = make_pairs(&s1, &world, &corpus.train, &corpus.text_pool, &pc).unwrap();
    assert!(pairs.len() >= 20, "{}", pairs.len());
    assert!(pairs.windows(2).all(|w| w[0].id < w[1].id));
    let again = make_pairs(
        &s1,
        &world,
        &corpus.train,
        &corpus.text_pool,
        &PairConfig { jobs: 3, ..pc },
    )
    .unwrap();
    assert!(pairs
        .iter()
        .zip(&again)
        .all(|(a, b)| a.id == b.id && a.prompt == b.prompt));

    // the synthetic prompt sits nearer its own speaker than a random other one
    let emb = world.scorers().embedder;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut wins, mut total) = (0, 0);
    for p in &pairs {
        let s = emb.embed(&p.prompt);
        let own = s.dot(&emb.embed(&p.target.features));
        for _ in 0..10 {
            let other = &corpus.train[rng.gen_range(0..corpus.train.len())];
            if other.record.speaker == p.target.record.speaker {
                continue;
            }
            total += 1;
            if own >= s.dot(&emb.embed(&other.features)) {
                wins += 1;
            }
        }
    }
    let rate = wins as f64 / total as f64;
    assert!(rate >= 0.85, "speaker ranking rate {rate:.3}");

    let train: Vec<_> = pairs
        .iter()
        .map(|p| p.to_train_pair(&world, &s1).unwrap())
        .collect();
    let (s2, log2) = train_stage2(
        &s1,
        &train,
        &TrainConfig {
            steps: 100,
            warmup_steps: 10,
            ..cfg
        },
    )
    .unwrap();
    assert_eq!(s2.stage, Stage::S2);
    assert!(log2.eval_final.is_finite());
    assert!(make_pairs(&s2, &world, &corpus.train, &corpus.text_pool, &pc).is_err());
}
