use intra_core::baselines::LexicalIndex;
use intra_core::qa::{token_f1, Mode, Pipeline, QaConfig};
use intra_core::retrieval::{Engine, RetrievalParams};
use intra_core::store::{build_pool, PooledIndex};
use intra_core::synth::{generate, SyntheticCorpus, SyntheticTaskSpec};
use intra_core::trainer::{train, TrainConfig};
use intra_core::{Model, ModelConfig, WeightInit};

fn corpus() -> SyntheticCorpus {
    generate(&SyntheticTaskSpec {
        m: 96,
        n_examples: 30,
        l_c: 10,
        ..SyntheticTaskSpec::default()
    })
    .unwrap()
}

fn model() -> Model {
    let config = ModelConfig {
        max_positions: 256,
        ..ModelConfig::default()
    };
    Model::random(config, &WeightInit::with_seed(1)).unwrap()
}

#[test]
fn end_to_end_report_is_consistent() {
    let corpus = corpus();
    let model = model();
    let checksum = model.weights().checksum();
    let pool = build_pool(&corpus.chunks, &model).unwrap();
    let pooled = PooledIndex::build(&pool, 3).unwrap();
    let engine = Engine::new(&model, &pool, &pooled).unwrap();
    let cfg = TrainConfig {
        steps: 15,
        batch_size: 4,
        n0: 5,
        ..TrainConfig::default()
    };
    let prepared: Vec<_> = corpus
        .train
        .iter()
        .map(|e| engine.prepare_example(e, cfg.n0).unwrap())
        .collect();
    let init = RetrievalParams::init(model.config(), 4, 0, 0.02).unwrap();
    let out = train(&engine, &prepared, &init, &cfg).unwrap();
    assert_eq!(out.history.len(), 15);
    assert!(out.history.iter().all(|h| h.loss.is_finite()));
    assert_eq!(model.weights().checksum(), checksum);

    let qa = QaConfig {
        n0: 5,
        ..QaConfig::default()
    };
    let pipeline = Pipeline::new(engine, &out.params, qa).unwrap();
    let lexical = LexicalIndex::build(&corpus.chunks);
    let detailed = pipeline
        .evaluate_detailed(&corpus.eval, &Mode::ALL, &lexical)
        .unwrap();
    for (mode, outcomes) in &detailed {
        assert_eq!(outcomes.len(), corpus.eval.len());
        for (o, ex) in outcomes.iter().zip(&corpus.eval) {
            assert_eq!(o.id, ex.id);
            assert!(o.context.len() <= 5);
            let f1 = token_f1(&o.prediction, &ex.answer);
            assert!(
                f64::from(u8::from(o.em)) <= f1 + 1e-12,
                "{mode}: EM above F1"
            );
            assert!(o.recall[0] <= o.recall[1] && o.recall[1] <= o.recall[2]);
        }
    }
    let report = pipeline
        .evaluate("toy", &corpus.eval, &Mode::ALL, &lexical)
        .unwrap();
    for m in &report.modes {
        for r in [m.recall_at_5, m.recall_at_10, m.recall_at_20, m.em] {
            assert!((0.0..=1.0).contains(&r.value) && r.ci >= 0.0);
        }
        assert!(
            m.recall_at_5.value <= m.recall_at_10.value
                && m.recall_at_10.value <= m.recall_at_20.value
        );
    }
    assert_eq!(report.mode(Mode::Complete).unwrap().recall_at_5.value, 1.0);
    // reranking only permutes S0, so recall at any k ≥ n0 is unchanged
    let (init_r, rr) = (
        report.mode(Mode::Initial).unwrap(),
        report.mode(Mode::Rerank).unwrap(),
    );
    assert_eq!(init_r.recall_at_5, rr.recall_at_5);
    assert_eq!(init_r.recall_at_10, rr.recall_at_10);
    if let Some(g) = report.mode(Mode::Complete).unwrap().gap_closure {
        assert!((g - 100.0).abs() < 1e-9);
    }
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 1 + Mode::ALL.len());

    let q = &corpus.eval[0].question;
    assert_eq!(pipeline.answer(q).unwrap(), pipeline.answer(q).unwrap());
}

#[test]
fn tiny_pools_degrade_gracefully() {
    let corpus = corpus();
    let model = model();
    let chunks = &corpus.chunks[..3];
    let pool = build_pool(chunks, &model).unwrap();
    let pooled = PooledIndex::build(&pool, 3).unwrap();
    let engine = Engine::new(&model, &pool, &pooled).unwrap();
    let params = RetrievalParams::init(model.config(), 4, 0, 0.02).unwrap();
    let pipeline = Pipeline::new(engine, &params, QaConfig::default()).unwrap();
    let r = pipeline.retrieve(&[10, 11, 12]).unwrap();
    assert_eq!(r.selection.len(), 3);
    let ctx = r.context(&pipeline.config);
    let mut sorted = ctx.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, vec![0, 1, 2]);
    pipeline.answer(&[10, 11, 12]).unwrap();
}
