//! Synthetic corpus through disk, model and checkpoint.

use visemic::checkpoint::Checkpoint;
use visemic::config::RunConfig;
use visemic::graph::{LandmarkStats, LipTemplate};
use visemic::lexicon::Lexicon;
use visemic::manifest::{load_manifest, write_manifest};
use visemic::model::{Stage1Config, Stage1Model};
use visemic::optim::AdamState;
use visemic::synth::{generate_corpus, select_words, SentenceGenerator, SynthConfig, Utterance};

fn corpus(n: usize) -> Vec<Utterance> {
    let cfg = SynthConfig {
        landmark_dropout: 0.2,
        ..Default::default()
    };
    let lex = Lexicon::shipped();
    let gen = SentenceGenerator::new(select_words(&lex, 20, 1), &cfg, 2).unwrap();
    generate_corpus("u", &gen, &lex, &cfg.prototypes().unwrap(), &cfg, n, 3).unwrap()
}

fn small_model(train: &[Utterance]) -> Stage1Model {
    Stage1Model::new(Stage1Config {
        d_enc: 16,
        heads: 2,
        ff_hidden: 16,
        fusion_hidden: 16,
        gcn_channels: 4,
        gcn_blocks: 1,
        landmark_stats: LandmarkStats::from_clips(&LipTemplate::canonical(), train.iter().map(|u| &u.landmarks)),
        seed: 5,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn manifest_round_trip_is_lossless() {
    let utts = corpus(6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    write_manifest(&path, &utts).unwrap();
    let back: Vec<Utterance> = load_manifest(&path).unwrap().collect::<Result<_, _>>().unwrap();
    assert_eq!(back, utts);
}

#[test]
fn checkpoint_restores_identical_decoding() {
    let utts = corpus(3);
    let model = small_model(&utts);
    let mut cfg = RunConfig::default();
    cfg.model = model.config().clone();
    let ck = Checkpoint::capture(&model, &AdamState::new(model.params().values()), 0, cfg.to_toml());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let restored_cfg = RunConfig::from_toml(&loaded.config).unwrap();
    assert_eq!(restored_cfg.model, *model.config());

    let mut restored = Stage1Model::new(Stage1Config {
        seed: 99,
        ..restored_cfg.model
    })
    .unwrap();
    loaded.restore_into(&mut restored).unwrap();
    for u in &utts {
        let a = model.decode_greedy(&u.frames, Some(&u.landmarks), 20).unwrap();
        let b = restored.decode_greedy(&u.frames, Some(&u.landmarks), 20).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let utts = corpus(1);
    let model = small_model(&utts);
    let ck = Checkpoint::capture(&model, &AdamState::new(model.params().values()), 2, String::new());
    let mut bytes = ck.to_bytes();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    assert!(Checkpoint::from_bytes(&bytes).is_err());
}
