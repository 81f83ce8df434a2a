use pitune_core::data::instructions::{build_instructions, parse_annotations, read_jsonl, to_jsonl, TemplateSet};
use pitune_core::data::load_proteins;
use pitune_core::data::synthetic::{SyntheticConfig, SyntheticCorpus};
use pitune_core::pipeline::{load_config, train_stage, Checkpoint, Corpus, ModelConfig, TrainConfig};
use pitune_core::Error;

fn corpus(proteins: usize) -> SyntheticCorpus {
    SyntheticCorpus::generate(&SyntheticConfig {
        proteins,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

#[test]
fn synthetic_corpus_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(16);
    c.write_to_dir(dir.path()).unwrap();
    let loaded = load_proteins(&dir.path().join("proteins.fasta"), Some(&dir.path().join("structures"))).unwrap();
    assert_eq!(loaded.len(), c.proteins.len());
    for (a, b) in loaded.iter().zip(&c.proteins) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.sequence, b.sequence);
        assert_eq!(a.coords.is_some(), b.coords.is_some());
        if let (Some(x), Some(y)) = (&a.coords, &b.coords) {
            // PDB columns keep three decimals.
            for (p, q) in x.points().iter().zip(y.points()) {
                for k in 0..3 {
                    assert!((p[k] - q[k]).abs() <= 5e-4);
                }
            }
        }
    }

    let table = std::fs::read_to_string(dir.path().join("annotations.tsv")).unwrap();
    let rows = parse_annotations(&table).unwrap();
    let records = build_instructions(&rows, &TemplateSet::standard(), 0).unwrap();
    assert_eq!(records, c.instructions(0).unwrap());
    assert_eq!(read_jsonl(&to_jsonl(&records)).unwrap(), records);
}

#[test]
fn checkpoint_file_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(8);
    let records = c.instructions(0).unwrap();
    let mut model = ModelConfig::default();
    model.set("enc.d", "8").unwrap();
    model.set("enc.heads", "2").unwrap();
    let cfg = TrainConfig {
        steps: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let data = Corpus {
        proteins: &c.proteins,
        records: &records,
    };
    let ckpt = train_stage(&cfg, &model, None, &data).unwrap().checkpoint;
    let path = dir.path().join("s0.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Manifest(_))));
}

#[test]
fn config_file_drives_both_configs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "# stage 2 run\nstage = 2\nbeta = 0.05\nsteps = 30\nlm.d = 32\nmoe.topk = 2\n").unwrap();
    let (train, model) = load_config(&path).unwrap();
    assert_eq!((train.stage, train.steps, train.beta), (2, 30, 0.05));
    assert_eq!((model.lm.d, model.lm.topk), (32, 2));

    std::fs::write(&path, "stage = 1\nlearning_rate = 0.1\n").unwrap();
    assert!(matches!(load_config(&path), Err(Error::Config(_))));
    assert!(load_config(&dir.path().join("missing.cfg")).is_err());
}
