use dine::cache::{read_cache, write_cache, CacheRecord, CachedPredictor};
use dine::checkpoint::{Checkpoint, SavedNet};
use dine::config::{Ablation, ExperimentConfig, Manifest, PredictorSource};
use dine::harness::{export_domain, read_metrics, write_metrics, MetricRecord};
use dine::Error;
use dine_core::distill::{run_distillation, AdaptConfig};
use dine_core::models::{Architecture, Network, SourceNet, TargetNet};
use dine_core::predictor::{init_teacher, Disclosed, DisclosureMode, LocalPredictor, Predictor, Query, TeacherEncoding};
use dine_core::scenario::{generate, ScenarioSpec};
use dine_core::training::{train_source, EpochRecord, Phase, SourceTrainConfig};
use proptest::prelude::*;
use std::fs;

/// Top-r answers that name every class carry the full vector.
fn canonical(d: Disclosed) -> Disclosed {
    match d {
        Disclosed::TopR { num_classes, pairs } if pairs.len() == num_classes => {
            let mut p = vec![0.0; num_classes];
            for (c, v) in pairs {
                p[c] = v;
            }
            Disclosed::Full(p)
        }
        other => other,
    }
}

fn small_spec() -> ScenarioSpec {
    ScenarioSpec { n_source: 200, n_target: 120, ..ScenarioSpec::reference() }
}

fn trained_source() -> SourceNet {
    let s = generate(&small_spec()).unwrap();
    let cfg = SourceTrainConfig { epochs: 3, ..SourceTrainConfig::default() };
    train_source(&cfg, &s.sources[0], |_, _| {}).unwrap()
}

#[test]
fn source_checkpoint_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt.json");
    let net = trained_source();
    Checkpoint::new(SavedNet::Source(net.clone()), 11).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.seed, 11);
    let back = back.into_source().unwrap();
    assert_eq!(back, net);
    // Identical bits give identical outputs.
    let x = generate(&small_spec()).unwrap().target.features;
    let a = net.predict_proba(&x).unwrap();
    let b = back.predict_proba(&x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
}

#[test]
fn target_checkpoint_keeps_running_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt.json");
    let s = generate(&small_spec()).unwrap();
    let src = LocalPredictor::new(trained_source(), DisclosureMode::TopR(1)).unwrap();
    let x = &s.target.features;
    let mut bank = init_teacher(&[&src], x, TeacherEncoding::AdaLs(1)).unwrap();
    let arch = Architecture { input_dim: 2, hidden: vec![16], num_classes: 2, bottleneck: 8 };
    let mut net = TargetNet::new(&arch, 5).unwrap();
    let cfg = AdaptConfig { epochs: 2, ..AdaptConfig::default() };
    run_distillation(&cfg, &mut bank, &mut net, x, |_, _, _| Ok(())).unwrap();
    Checkpoint::new(SavedNet::Target(net.clone()), 5).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().into_target().unwrap();
    assert_eq!(back, net);
    let a = net.predict_proba(x).unwrap();
    let b = back.predict_proba(x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
}

#[test]
fn checkpoint_rejects_other_versions_and_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt.json");
    Checkpoint::new(SavedNet::Source(trained_source()), 1).save(&path).unwrap();
    assert!(Checkpoint::load(&path).unwrap().into_target().is_err());

    let mut value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    value["version"] = serde_json::json!(99);
    fs::write(&path, value.to_string()).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Version { found: 99, .. })));
    assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn cache_round_trips_every_disclosure() {
    let dir = tempfile::tempdir().unwrap();
    let x = generate(&small_spec()).unwrap().target.features;
    let net = trained_source();
    for mode in [DisclosureMode::Full, DisclosureMode::TopR(1), DisclosureMode::TopR(2), DisclosureMode::Hard] {
        let local = LocalPredictor::new(net.clone(), mode).unwrap();
        let path = dir.path().join("cache.ndjson");
        assert_eq!(write_cache(&path, "source-0", &local, &x).unwrap(), x.rows());
        let records = read_cache(&path).unwrap();
        assert_eq!(records.len(), x.rows());
        let cached = CachedPredictor::from_records(&records, 2).unwrap();
        assert_eq!(cached.predictor_id(), "source-0");
        for i in 0..x.rows() {
            let q = Query { id: i, features: x.row(i) };
            assert_eq!(cached.predict(q).unwrap(), canonical(local.predict(q).unwrap()), "{mode:?} sample {i}");
        }
        let missing = Query { id: x.rows() + 3, features: x.row(0) };
        assert!(cached.predict(missing).is_err());
    }
}

#[test]
fn cache_record_fields() {
    let d = Disclosed::TopR { num_classes: 5, pairs: vec![(3, 0.6), (0, 0.2)] };
    let rec = CacheRecord::from_disclosed(7, "source-1", &d);
    assert_eq!(rec.classes, vec![3, 0]);
    assert_eq!(rec.probs, vec![0.6, 0.2]);
    assert_eq!(rec.r, 2);
    assert_eq!(rec.to_disclosed().unwrap(), d);

    let hard = CacheRecord::from_disclosed(0, "s", &Disclosed::Hard { num_classes: 3, class: 2 });
    assert_eq!((hard.r, hard.classes.as_slice(), hard.probs.len()), (0, &[2usize][..], 0));
    assert_eq!(hard.to_disclosed().unwrap(), Disclosed::Hard { num_classes: 3, class: 2 });

    let mut bad = rec.clone();
    bad.classes[0] = 9;
    assert!(bad.to_disclosed().is_err());
}

#[test]
fn cache_rejects_duplicates_and_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let d = Disclosed::Full(vec![0.25, 0.75]);
    let recs = vec![CacheRecord::from_disclosed(0, "a", &d), CacheRecord::from_disclosed(0, "a", &d)];
    assert!(CachedPredictor::from_records(&recs, 2).is_err());
    let mixed = vec![CacheRecord::from_disclosed(0, "a", &d), CacheRecord::from_disclosed(1, "b", &d)];
    assert!(CachedPredictor::from_records(&mixed, 2).is_err());
    assert!(CachedPredictor::from_records(&[], 2).is_err());

    let path = dir.path().join("bad.ndjson");
    fs::write(&path, format!("{}\nnot json\n", serde_json::to_string(&recs[0]).unwrap())).unwrap();
    assert!(matches!(read_cache(&path), Err(Error::Parse { line: 2, .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cache_records_survive_json(raw in prop::collection::vec(1e-6f64..1.0, 2..8), r in 1usize..8) {
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let r = r.min(p.len());
        for mode in [DisclosureMode::Full, DisclosureMode::TopR(r), DisclosureMode::Hard] {
            let d = dine_core::predictor::disclose(&p, mode).unwrap();
            let rec = CacheRecord::from_disclosed(3, "x", &d);
            let back: CacheRecord = serde_json::from_str(&serde_json::to_string(&rec).unwrap()).unwrap();
            prop_assert_eq!(&back, &rec);
            prop_assert_eq!(back.to_disclosed().unwrap(), canonical(d));
        }
    }
}

#[test]
fn config_round_trips_through_toml() {
    let mut partial = ExperimentConfig { name: "partial".into(), ..ExperimentConfig::default() };
    partial.scenario = ScenarioSpec::partial();
    partial.disclosure = DisclosureMode::Full;
    partial.adapt.teacher = TeacherEncoding::Ls;
    let multi = ExperimentConfig { scenario: ScenarioSpec::multi_source(), disclosure: DisclosureMode::Hard, ..ExperimentConfig::default() };
    for cfg in [ExperimentConfig::default(), partial, multi] {
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }
}

#[test]
fn config_files_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    let cfg = ExperimentConfig::default();
    cfg.save(&path).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
    cfg.validate().unwrap();

    let no_seeds = ExperimentConfig { seeds: vec![], ..cfg.clone() };
    assert!(no_seeds.validate().is_err());
    let mut wide_r = cfg.clone();
    wide_r.adapt.teacher = TeacherEncoding::AdaLs(3);
    assert!(wide_r.validate().is_err());
    let mut starved = cfg.clone();
    starved.scenario = ScenarioSpec::partial();
    starved.adapt.teacher = TeacherEncoding::AdaLs(4);
    assert!(starved.validate().is_err());
    starved.disclosure = DisclosureMode::TopR(4);
    starved.validate().unwrap();

    fs::write(&path, "name = 3").unwrap();
    assert!(matches!(ExperimentConfig::load(&path), Err(Error::Toml(_))));
}

#[test]
fn ablations_touch_only_their_switch() {
    let cfg = ExperimentConfig::default();
    let a = cfg.with_ablation(&Ablation { drop_mi: true, ..Ablation::default() });
    assert!(!a.adapt.use_mi);
    assert_eq!(a.adapt.beta, cfg.adapt.beta);
    let b = cfg.with_ablation(&Ablation { drop_mix: true, ..Ablation::default() });
    assert_eq!(b.adapt.beta, 0.0);
    assert!(b.adapt.use_mi);
    let c = cfg.with_ablation(&Ablation { drop_ft: true, gamma: Some(0.0), teacher: Some(TeacherEncoding::Hard), ..Ablation::default() });
    assert_eq!(c.finetune.epochs, 0);
    assert_eq!(c.adapt.gamma, 0.0);
    assert_eq!(c.adapt.teacher, TeacherEncoding::Hard);
    assert_eq!(cfg.with_ablation(&Ablation::default()), cfg);
}

#[test]
fn manifest_round_trip_and_version() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.toml");
    for source in [
        PredictorSource::Checkpoints(vec!["a.json".into(), "b.json".into()]),
        PredictorSource::Caches(vec!["c.ndjson".into()]),
        PredictorSource::Endpoints(vec!["127.0.0.1:7070".into()]),
    ] {
        let m = Manifest::new("adapt", source, ExperimentConfig::default());
        m.save(&path).unwrap();
        assert_eq!(Manifest::load(&path).unwrap(), m);
    }
    let text = fs::read_to_string(&path).unwrap().replacen("version = 1", "version = 2", 1);
    fs::write(&path, text).unwrap();
    assert!(matches!(Manifest::load(&path), Err(Error::Version { found: 2, .. })));
}

#[test]
fn metrics_are_line_delimited() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.ndjson");
    let records: Vec<MetricRecord> = (0..4)
        .map(|e| MetricRecord {
            run: "dine".into(),
            seed: 2019,
            record: EpochRecord { phase: Phase::Distill, epoch: e, loss: 0.1 * e as f64, kd: 0.3, mix: 0.2, mi: 0.5, entropy: 0.01 },
            accuracy: 90.0 + e as f64,
        })
        .collect();
    write_metrics(&path, &records).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["phase"], "distill");
    assert_eq!(first["seed"], 2019);
    assert_eq!(read_metrics(&path).unwrap(), records);
}

#[test]
fn domains_export_as_delimited_text() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let s = generate(&small_spec()).unwrap();
    let d = &s.sources[0];
    export_domain(&path, &d.features, &d.labels).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x0,x1,label"));
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 3);
        assert_eq!(f[0].parse::<f64>().unwrap(), d.features.get(i, 0));
        assert_eq!(f[1].parse::<f64>().unwrap(), d.features.get(i, 1));
        assert_eq!(f[2].parse::<usize>().unwrap(), d.labels[i]);
    }
}
