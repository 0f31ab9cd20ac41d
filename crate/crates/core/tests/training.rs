mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sed_core::corpus::{TokenStream, TokenizerMode, Vocab};
use sed_core::denoiser::DenoiserConfig;
use sed_core::embedding::EmbeddingMatrix;
use sed_core::masking::ConditioningMask;
use sed_core::schedule::NoiseSchedule;
use sed_core::synthetic::desk_corpus;
use sed_core::tensor::Matrix;
use sed_core::training::{diffusion_loss, loss_and_gradients, prepare_batch, LossWeights, SedModel, TrainConfig, Trainer};

fn small_trainer(seed: u64, self_condition: bool) -> Trainer {
    let text = desk_corpus(100, 0);
    let vocab = Vocab::build(&text, 256, TokenizerMode::Char).unwrap();
    let e = EmbeddingMatrix::random(vocab.size(), 8, 0).unwrap();
    let cfg = DenoiserConfig {
        self_condition,
        ..common::tiny_denoiser(8, 16)
    };
    let model = SedModel::init(&cfg, &e, 0).unwrap();
    let train = TrainConfig {
        steps: 20,
        seq_len: 16,
        batch_tokens: 64,
        seed,
        ..TrainConfig::default()
    };
    let sched = NoiseSchedule::cosine(100, 0.008, 1e-2).unwrap();
    let stream = TokenStream::new(vocab.encode(&text).0).unwrap();
    Trainer::new(train, model, e, sched, stream).unwrap()
}

#[test]
fn total_is_diffusion_plus_recon() {
    for sc in [true, false] {
        let mut t = small_trainer(1, sc);
        for _ in 0..3 {
            let m = t.step().unwrap();
            assert!((m.loss - (m.diffusion + m.recon)).abs() <= 1e-6 * m.loss.abs().max(1.0));
            assert_eq!(m.diffusion_pass2.is_some(), sc);
        }
    }
}

#[test]
fn embedding_stays_frozen() {
    let mut t = small_trainer(2, true);
    let before = t.embedding.clone();
    let readout = t.model.readout.clone();
    for _ in 0..5 {
        t.step().unwrap();
    }
    assert_eq!(t.embedding, before);
    assert_ne!(t.model.readout, readout);
}

#[test]
fn conditioning_positions_do_not_enter_the_loss() {
    let x0 = Matrix::from_fn(6, 3, |i, j| (i * 3 + j) as f64);
    let mut est = x0.map(|v| v + 0.25);
    let mask = ConditioningMask(vec![true, false, false, true, true, false]);
    let base = diffusion_loss(&x0, &est, &mask);
    for i in [0, 3, 4] {
        est.row_mut(i).iter_mut().for_each(|v| *v += 100.0);
    }
    assert_eq!(diffusion_loss(&x0, &est, &mask), base);
    assert!((base - 0.0625).abs() < 1e-15);
}

#[test]
fn conditioning_rows_have_no_loss_gradient_through_targets() {
    let t = small_trainer(3, true);
    let model: SedModel<f64> = t.model.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let seqs = small_trainer(3, true).next_batch().unwrap();
    let batch = prepare_batch(&seqs, &t.embedding, &t.schedule, &t.config, &mut rng).unwrap();
    let mut moved = batch.clone();
    for r in (0..moved.target.rows()).filter(|&r| !moved.infill[r]) {
        moved.target.row_mut(r).iter_mut().for_each(|v| *v += 10.0);
    }
    let w = LossWeights::standard(true);
    let a = loss_and_gradients(&model, &batch, w).unwrap();
    let b = loss_and_gradients(&model, &moved, w).unwrap();
    assert_eq!(a.total, b.total);
    assert_eq!(a.gradients, b.gradients);
}

#[test]
fn same_seed_gives_identical_metric_streams() {
    let run = |seed| {
        let mut t = small_trainer(seed, true);
        t.deterministic = true;
        (0..5).map(|_| t.step().unwrap()).collect::<Vec<_>>()
    };
    let a = run(7);
    assert_eq!(a, run(7));
    assert!(a.iter().all(|m| m.tokens_per_sec.is_none()));
    assert_ne!(a, run(8));
}

#[test]
fn stop_gradient_contract() {
    let c = common::stop_gradient_exact();
    assert!(c.pass, "{}", c.detail);
}
