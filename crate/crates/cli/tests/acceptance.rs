//! Acceptance suite: one test per criterion, each printing a pass line once
//! its assertions hold. The heavy desk-scale criteria (4 and 5) share one
//! cached beta sweep so the suite stays inside its CPU budget.
//!
//! Run with `cargo test -p slategen-cli --test acceptance -- --nocapture`
//! to see the per-criterion lines.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slategen_cli::config::{ModelKind, RunConfig};
use slategen_cli::pipeline::run_pipeline;
use slategen_cli::sweep::{run_beta_sweep, SweepReport};

use slategen_core::dataio::{make_constraint, Dataset, ItemId, Record, ResponseVector, Slate};
use slategen_core::evalkit::{
    coverage, enc, mean_abs_enc_shift, variance_decomposition, SampleSet,
};
use slategen_core::models::{
    mmr_rerank, rank_topk, train_pointwise_ranker, CvaeConfig, EmbeddingBank, ListCvae,
    PivotCvae, PivotVariant, RankerConfig, RankerKind, SlateGenerator, TopKPolicy,
};
use slategen_core::numkit::{
    gaussian_kl, grad_check, sampled_softmax_ce, sigmoid, GaussianParams, Tensor2,
};
use slategen_core::simenv::{build_environment, generate_dataset, EnvKind, SimConfig};

const MASTER_SEED: u64 = 11;

fn pass(criterion: &str, detail: String) {
    println!("[acceptance] {criterion}: PASS — {detail}");
}

// ---------------------------------------------------------------------------
// Criterion 1: variance-decomposition identity
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_variance_decomposition_identity() {
    // hand example: slates {0,2} and {4,6} of one-dim items
    let set = SampleSet::from_vectors(vec![
        vec![vec![0.0], vec![2.0]],
        vec![vec![4.0], vec![6.0]],
    ]);
    let v = variance_decomposition(&set).unwrap();
    assert_eq!((v.total, v.slate_mean, v.intra_slate), (5.0, 4.0, 1.0));

    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=50);
        let slates: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|_| {
                (0..5)
                    .map(|_| (0..8).map(|_| rng.gen::<f64>() * 8.0 - 4.0).collect())
                    .collect()
            })
            .collect();
        let v = variance_decomposition(&SampleSet::from_vectors(slates)).unwrap();
        let rel = (v.total - (v.slate_mean + v.intra_slate)).abs() / v.total.abs().max(1e-12);
        worst = worst.max(rel);
        assert!(rel < 1e-9, "identity violated at relative error {rel}");
    }
    pass(
        "criterion 1 (variance decomposition identity)",
        format!("hand example (5,4,1) exact; worst relative error {worst:.3e} over 100 sets"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: gradient correctness of both CVAE losses
// ---------------------------------------------------------------------------

fn tiny_bank(seed: u64) -> EmbeddingBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EmbeddingBank::new(Tensor2::randn(10, 3, 1.0, &mut rng), None)
}

fn tiny_cvae_config(seed: u64) -> CvaeConfig {
    CvaeConfig {
        latent_dim: 3,
        hidden: 6,
        beta: 0.9,
        personalized: false,
        lr: 1e-3,
        weight_decay: 0.0,
        batch: 4,
        negatives: 3,
        epochs: 1,
        seed,
    }
}

type LossCase = (Slate, slategen_core::dataio::ConstraintVector, Vec<f64>, Vec<Vec<ItemId>>);

fn fixed_batch(k: usize, latent: usize, seed: u64) -> Vec<LossCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..4)
        .map(|_| {
            let items: Vec<ItemId> = (0..k).map(|_| rng.gen_range(0..10)).collect();
            let bits: Vec<u8> = (0..k).map(|_| rng.gen_range(0..2)).collect();
            let c = make_constraint(&ResponseVector::new(bits).unwrap(), None);
            let noise: Vec<f64> = (0..latent).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let negs: Vec<Vec<ItemId>> = (0..k)
                .map(|_| (0..3).map(|_| rng.gen_range(0..10)).collect())
                .collect();
            (Slate::new(items), c, noise, negs)
        })
        .collect()
}

#[test]
fn criterion_2_gradient_correctness() {
    let k = 3;
    let list = ListCvae::new(tiny_bank(1), k, tiny_cvae_config(2)).unwrap();
    let batch = fixed_batch(k, 3, 3);
    let list_err = grad_check(list.params(), 1e-4, |g, p| {
        let losses: Vec<_> = batch
            .iter()
            .map(|(s, c, noise, negs)| list.loss_node_for_check(g, p, s, c, noise, negs))
            .collect();
        let total = g.sum_scalars(&losses);
        g.scale(total, 0.25)
    })
    .unwrap();
    assert!(list_err < 1e-4, "List-CVAE max relative error {list_err}");

    let pivot = PivotCvae::new(tiny_bank(4), k, PivotVariant::SgtSpi, tiny_cvae_config(5)).unwrap();
    let batch = fixed_batch(k, 3, 6);
    let pivot_err = grad_check(pivot.params(), 1e-4, |g, p| {
        let losses: Vec<_> = batch
            .iter()
            .enumerate()
            .map(|(i, (s, c, noise, negs))| {
                let fed = (i % 2 == 0).then_some(i % 10);
                pivot.loss_node_for_check(g, p, s, c, noise, negs, fed)
            })
            .collect();
        let total = g.sum_scalars(&losses);
        g.scale(total, 0.25)
    })
    .unwrap();
    assert!(pivot_err < 1e-4, "Pivot-CVAE max relative error {pivot_err}");
    pass(
        "criterion 2 (gradient correctness)",
        format!("List-CVAE {list_err:.2e}, Pivot-CVAE {pivot_err:.2e} vs central differences"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: simulator fidelity
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_simulator_fidelity() {
    // (a) rho = 0 collapses URM_P_MR onto URM_P, bit-exactly
    let mut config = SimConfig::new(120, 40, MASTER_SEED);
    config.relation_weight = 0.0;
    let mr = build_environment(EnvKind::UrmPMr, &config).unwrap();
    let p = build_environment(EnvKind::UrmP, &config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED + 1);
    for _ in 0..10_000 {
        let items: Vec<ItemId> = rand::seq::index::sample(&mut rng, 120, 5).into_vec();
        let slate = Slate::new(items);
        let user = rng.gen_range(0..40);
        let slot = rng.gen_range(0..5);
        let a = mr.interest(slate.get(slot), Some(user), &slate, slot).unwrap();
        let b = p.interest(slate.get(slot), Some(user), &slate, slot).unwrap();
        assert_eq!(a, b, "rho=0 probe mismatch");
    }

    // (b) Bernoulli sampling matches the analytic interest per slot
    let mut config = SimConfig::new(50, 10, MASTER_SEED + 2);
    config.relation_weight = 0.5;
    let env = build_environment(EnvKind::UrmPMr, &config).unwrap();
    let slate = Slate::new(vec![3, 17, 25, 31, 49]);
    let user = Some(4);
    let probs: Vec<f64> = (0..5)
        .map(|slot| env.interest(slate.get(slot), user, &slate, slot).unwrap())
        .collect();
    let n = 100_000usize;
    let mut counts = [0usize; 5];
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED + 3);
    for _ in 0..n {
        let r = env.sample_response(&slate, user, &mut rng).unwrap();
        for (slot, &bit) in r.bits().iter().enumerate() {
            counts[slot] += bit as usize;
        }
    }
    for slot in 0..5 {
        let rate = counts[slot] as f64 / n as f64;
        let sigma = (probs[slot] * (1.0 - probs[slot]) / n as f64).sqrt();
        assert!(
            (rate - probs[slot]).abs() <= 3.0 * sigma,
            "slot {slot}: rate {rate} vs interest {} (3 sigma {})",
            probs[slot],
            3.0 * sigma
        );
    }

    // (c) analytic expected clicks matches Monte-Carlo ENC on an exhaustive
    // 6-item toy
    let mut config = SimConfig::new(6, 5, MASTER_SEED + 4);
    config.relation_weight = 0.5;
    let env = build_environment(EnvKind::UrmPMr, &config).unwrap();
    let user = Some(2);
    let mut values = Vec::with_capacity(6usize.pow(5));
    for a in 0..6 {
        for b in 0..6 {
            for c in 0..6 {
                for d in 0..6 {
                    for e in 0..6 {
                        let s = Slate::new(vec![a, b, c, d, e]);
                        values.push(env.expected_clicks(&s, user).unwrap());
                    }
                }
            }
        }
    }
    let brute = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - brute) * (v - brute)).sum::<f64>() / values.len() as f64;

    struct UniformPolicy;
    impl SlateGenerator for UniformPolicy {
        fn generate(
            &self,
            _user: Option<usize>,
            rng: &mut dyn rand::RngCore,
        ) -> slategen_core::Result<Slate> {
            let mut items = Vec::with_capacity(5);
            for _ in 0..5 {
                items.push((rng.next_u64() % 6) as usize);
            }
            Ok(Slate::new(items))
        }
    }
    let n = 10_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED + 5);
    let mc = enc(&UniformPolicy, &env, &[user], n, &mut rng).unwrap();
    let sigma = (var / n as f64).sqrt();
    assert!(
        (mc - brute).abs() <= 3.0 * sigma,
        "MC ENC {mc} vs exhaustive {brute} (3 sigma {})",
        3.0 * sigma
    );
    pass(
        "criterion 3 (simulator fidelity)",
        format!(
            "rho=0 bit-exact on 10^4 probes; click rates within 3 sigma; \
             MC ENC {mc:.4} vs exhaustive {brute:.4}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criteria 4 and 5: the desk-scale RCD sweep and Pivot-CVAE variance control
// ---------------------------------------------------------------------------

fn desk_config() -> RunConfig {
    let mut config = RunConfig::default();
    config.sim.n_items = 300;
    config.sim.n_users = 100;
    config.sim.rho = 0.5;
    config.data.n_slates = 10_000;
    config.model.personalized = true;
    config.train.epochs = 150;
    // tight ENC-convergence rule: over-reconstruction cells stop within
    // ~20 epochs while beta = 1.0 cells keep concentrating toward the cap
    config.train.converge_min_improve = 3e-4;
    config.train.converge_patience = 8;
    config.train.converge_probe_samples = 50;
    config.eval.n_samples = 500;
    config.sweep.betas = vec![1e-4, 1e-2, 1.0];
    config.sweep.replicates = 3;
    config.sweep.model = ModelKind::ListCvae;
    config.sweep.dump_z = false;
    config
}

fn list_sweep() -> &'static SweepReport {
    static SWEEP: OnceLock<SweepReport> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let report = run_beta_sweep(&desk_config(), MASTER_SEED, dir.path(), 0).unwrap();
        assert!(
            report.failures.is_empty(),
            "sweep cells failed: {:?}",
            report.failures
        );
        report
    })
}

fn gtspi_sweep() -> &'static SweepReport {
    static SWEEP: OnceLock<SweepReport> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let mut config = desk_config();
        config.sweep.betas = vec![1.0];
        config.sweep.model = ModelKind::PivotCvae(PivotVariant::GtSpi);
        let dir = tempfile::tempdir().unwrap();
        let report = run_beta_sweep(&config, MASTER_SEED, dir.path(), 0).unwrap();
        assert!(
            report.failures.is_empty(),
            "sweep cells failed: {:?}",
            report.failures
        );
        report
    })
}

fn mean_at<F: Fn(&slategen_core::evalkit::MetricsReport) -> f64>(
    report: &SweepReport,
    beta: f64,
    get: F,
) -> f64 {
    let values: Vec<f64> = report
        .cells
        .iter()
        .filter(|c| (c.beta - beta).abs() < 1e-12)
        .map(|c| get(&c.report))
        .collect();
    assert_eq!(values.len(), 3, "expected 3 replicates at beta {beta}");
    values.iter().sum::<f64>() / values.len() as f64
}

#[test]
fn criterion_4_rcd_reproduction_at_desk_scale() {
    let report = list_sweep();
    let enc_low = mean_at(report, 1e-4, |r| r.enc);
    let enc_high = mean_at(report, 1.0, |r| r.enc);
    let cov_low = mean_at(report, 1e-4, |r| r.coverage);
    let cov_high = mean_at(report, 1.0, |r| r.coverage);

    assert!(
        enc_high >= 1.15 * enc_low,
        "ENC at beta=1.0 ({enc_high:.4}) must exceed ENC at beta=1e-4 ({enc_low:.4}) by >= 15%"
    );
    assert!(
        cov_low >= 3.0 * cov_high,
        "coverage at beta=1e-4 ({cov_low:.4}) must exceed coverage at beta=1.0 ({cov_high:.4}) by >= 3x"
    );
    pass(
        "criterion 4 (RCD at desk scale)",
        format!(
            "ENC {enc_low:.3} -> {enc_high:.3} (x{:.2}), coverage {cov_low:.3} -> {cov_high:.3} (x{:.2})",
            enc_high / enc_low,
            cov_low / cov_high
        ),
    );
}

#[test]
fn criterion_5_pivot_cvae_variance_control() {
    let list = list_sweep();
    let pivot = gtspi_sweep();
    let list_enc = mean_at(list, 1.0, |r| r.enc);
    let list_cov = mean_at(list, 1.0, |r| r.coverage);
    let list_ild = mean_at(list, 1.0, |r| r.ild_mean);
    let pivot_enc = mean_at(pivot, 1.0, |r| r.enc);
    let pivot_cov = mean_at(pivot, 1.0, |r| r.coverage);
    let pivot_ild = mean_at(pivot, 1.0, |r| r.ild_mean);

    assert!(
        pivot_cov >= 2.0 * list_cov,
        "GT-SPI coverage ({pivot_cov:.4}) must be >= 2x List-CVAE coverage ({list_cov:.4})"
    );
    assert!(
        pivot_ild > list_ild,
        "GT-SPI ILD ({pivot_ild:.4}) must exceed List-CVAE ILD ({list_ild:.4})"
    );
    assert!(
        pivot_enc >= 0.85 * list_enc,
        "GT-SPI ENC ({pivot_enc:.4}) must stay within 15% of List-CVAE ENC ({list_enc:.4})"
    );
    pass(
        "criterion 5 (Pivot-CVAE variance control)",
        format!(
            "coverage x{:.2}, ILD {list_ild:.3} -> {pivot_ild:.3}, ENC ratio {:.3}",
            pivot_cov / list_cov,
            pivot_enc / list_enc
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: deterministic-baseline anchors
// ---------------------------------------------------------------------------

fn toy_ranker_dataset(n_items: usize, n_users: usize, seed: u64) -> Dataset {
    let k = n_items.min(5);
    let mut d = Dataset::new(n_items, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..400 {
        let user = rng.gen_range(0..n_users);
        let items: Vec<ItemId> = rand::seq::index::sample(&mut rng, n_items, k).into_vec();
        let bits: Vec<u8> = items
            .iter()
            .map(|&i| u8::from(i % n_users == user && rng.gen::<f64>() < 0.9))
            .collect();
        d.push(Record {
            user: Some(user),
            slate: Slate::new(items),
            response: ResponseVector::new(bits).unwrap(),
        })
        .unwrap();
    }
    d
}

#[test]
fn criterion_6_deterministic_baseline_anchors() {
    // a 50-item toy with a trained MF ranker
    let d = toy_ranker_dataset(50, 5, MASTER_SEED + 6);
    let config = RankerConfig {
        max_epochs: 10,
        ..Default::default()
    };
    let ranker = train_pointwise_ranker(RankerKind::Mf, &d, None, &config).unwrap();
    let bank = EmbeddingBank::new(ranker.item_embeddings().clone(), None);

    // rank_topk coverage is exactly 5 / |D|
    let policy = TopKPolicy { ranker: &ranker, k: 5 };
    let users: Vec<Option<usize>> = (0..5).map(Some).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED + 7);
    let samples = SampleSet::generate(&policy, &bank, &users, 500, &mut rng).unwrap();
    let cov = coverage(&samples, 50).unwrap();
    assert_eq!(cov, 5.0 / 50.0, "top-K coverage must be exactly 5/|D|");

    // MMR with lambda = 1 equals top-K for every user
    for user in 0..5 {
        let a = mmr_rerank(&ranker, &bank, Some(user), 5, 1.0).unwrap();
        let b = rank_topk(&ranker, Some(user), 5).unwrap();
        assert_eq!(a, b, "user {user}: MMR(lambda=1) != top-K");
    }

    // greedy trace matches per-step brute force on a 4-item universe
    let d4 = toy_ranker_dataset(4, 2, MASTER_SEED + 8);
    let ranker4 = train_pointwise_ranker(RankerKind::Mf, &d4, None, &config).unwrap();
    let bank4 = EmbeddingBank::new(ranker4.item_embeddings().clone(), None);
    for user in 0..2 {
        for &lambda in &[0.2, 0.5, 0.8] {
            let got = mmr_rerank(&ranker4, &bank4, Some(user), 3, lambda).unwrap();
            // replay the greedy argmax step by step
            let scores: Vec<f64> = (0..4).map(|i| ranker4.score(Some(user), i).unwrap()).collect();
            let mut chosen: Vec<usize> = Vec::new();
            for _ in 0..3 {
                let mut best: Option<(f64, usize)> = None;
                for cand in 0..4 {
                    if chosen.contains(&cand) {
                        continue;
                    }
                    let max_sim = chosen
                        .iter()
                        .map(|&c| bank4.item_similarity(c, cand))
                        .fold(f64::NEG_INFINITY, f64::max);
                    let max_sim = if chosen.is_empty() { 0.0 } else { max_sim };
                    let score = lambda * scores[cand] + (1.0 - lambda) * max_sim;
                    if best.map_or(true, |(s, _)| score > s) {
                        best = Some((score, cand));
                    }
                }
                chosen.push(best.unwrap().1);
            }
            assert_eq!(got.items(), &chosen[..], "user {user} lambda {lambda}");
        }
    }
    pass(
        "criterion 6 (deterministic baseline anchors)",
        format!("top-K coverage {cov}; MMR(1)=top-K on 50-item toy; greedy trace matches brute force"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: perturbation-shift monotonicity
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_perturbation_shift_monotonicity() {
    let mut config = SimConfig::new(300, 100, MASTER_SEED + 9);
    config.relation_weight = 0.5;
    let env = build_environment(EnvKind::UrmPMr, &config).unwrap();
    let bank = EmbeddingBank::from_environment(&env).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED + 10);
    let d = generate_dataset(&env, 10_000, &mut rng).unwrap();
    let ideal: Vec<&Record> = d
        .records
        .iter()
        .filter(|r| r.response.clicks() == d.slate_size)
        .collect();
    assert!(
        ideal.len() > 100,
        "need ideal-response slates, found {}",
        ideal.len()
    );

    let trials = 10_000usize;
    let mut shifts = Vec::new();
    for &a in &[0usize, 1, 3] {
        let shift = mean_abs_enc_shift(&ideal, &env, &bank, a, trials, &mut rng).unwrap();
        shifts.push((a, shift));
    }
    assert_eq!(shifts[0].1, 0.0, "a = 0 must shift nothing");
    assert!(
        shifts[0].1 < shifts[1].1 && shifts[1].1 < shifts[2].1,
        "|ENC shift| must increase strictly in a: {shifts:?}"
    );
    pass(
        "criterion 7 (perturbation shift monotonicity)",
        format!(
            "mean |ENC shift| at a=0,1,3: {:.4}, {:.4}, {:.4} over {trials} trials",
            shifts[0].1, shifts[1].1, shifts[2].1
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: pipeline determinism
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_pipeline_determinism() {
    let mut config = RunConfig::default();
    config.sim.n_items = 80;
    config.sim.n_users = 30;
    config.sim.rho = 0.5;
    config.data.n_slates = 1500;
    config.model.kinds = vec![ModelKind::Mf, ModelKind::ListCvae];
    config.model.personalized = true;
    config.train.epochs = 8;
    config.train.early_stop = false;
    config.eval.n_samples = 100;

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run_pipeline(&config, MASTER_SEED, dir_a.path()).unwrap();
    run_pipeline(&config, MASTER_SEED, dir_b.path()).unwrap();

    let a = std::fs::read(dir_a.path().join("metrics.csv")).unwrap();
    let b = std::fs::read(dir_b.path().join("metrics.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "reruns with identical config+seed must be byte-identical");

    let text = String::from_utf8(a).unwrap();
    let rows = text.lines().count();
    assert_eq!(rows, 3, "header plus one row per model");
    pass(
        "criterion 8 (pipeline determinism)",
        format!("two runs byte-identical; {} metric rows", rows - 1),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: closed-form spot checks
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_closed_form_spot_checks() {
    let q0 = GaussianParams::standard(1);
    assert!(gaussian_kl(&q0, &q0).unwrap().abs() < 1e-6);

    let q = GaussianParams::new(vec![2.0], vec![0.0]).unwrap();
    assert!((gaussian_kl(&q, &q0).unwrap() - 2.0).abs() < 1e-6);

    // exact closed forms within 1e-6, printed constants within rounding
    let q = GaussianParams::new(vec![0.0], vec![1.0]).unwrap();
    let kl_var = gaussian_kl(&q, &q0).unwrap();
    assert!((kl_var - 0.5 * (1.0f64.exp() - 2.0)).abs() < 1e-6);
    assert!((kl_var - 0.35914).abs() < 1e-5);

    let ln2 = sampled_softmax_ce(1.7, &[1.7]).unwrap();
    assert!((ln2 - std::f64::consts::LN_2).abs() < 1e-6);

    let ce = sampled_softmax_ce(1.0, &[0.0]).unwrap();
    assert!((ce - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-6);
    assert!((ce - 0.31326).abs() < 1e-5);

    // sigmoid anchor used throughout the similarity metrics
    assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    pass(
        "criterion 9 (closed-form spot checks)",
        "KL {0, 2, 0.35914} and sampled CE {ln 2, 0.31326} within tolerance".to_string(),
    );
}
