//! Evaluation of slate generators against a ground-truth environment:
//! expected number of clicks (ENC), the item-variance decomposition into
//! slate-mean and intra-slate parts, item coverage, intra-list diversity,
//! held-out hit/recall, and the item-perturbation study.
//!
//! Stochastic generators are summarized over N sampled slates per user;
//! deterministic rankers contribute their single slate. All metrics average
//! user-wise when users are present.

use rand::Rng;

use crate::dataio::{Dataset, Record, Slate, UserId};
use crate::models::{multinomial_similar_item, EmbeddingBank, SlateGenerator};
use crate::simenv::Environment;
use crate::{Error, Result};

/// N sampled slates per evaluated user, with their item embedding vectors
/// from one fixed bank.
#[derive(Debug, Clone)]
pub struct SampleSet {
    groups: Vec<UserSamples>,
}

#[derive(Debug, Clone)]
pub struct UserSamples {
    pub user: Option<UserId>,
    /// Item ids per sampled slate; empty only for raw-vector sample sets.
    pub slates: Vec<Slate>,
    /// `N x K x dim` embedding vectors.
    pub vectors: Vec<Vec<Vec<f64>>>,
}

impl SampleSet {
    /// Draw N slates per user (one for deterministic generators) and attach
    /// their embedding vectors.
    pub fn generate(
        generator: &dyn SlateGenerator,
        bank: &EmbeddingBank,
        users: &[Option<UserId>],
        n: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<SampleSet> {
        if users.is_empty() {
            return Err(Error::Empty("sample set needs at least one user".into()));
        }
        if n == 0 {
            return Err(Error::Contract("sample count must be positive".into()));
        }
        let n_eff = if generator.is_deterministic() { 1 } else { n };
        let mut groups = Vec::with_capacity(users.len());
        for &user in users {
            let mut slates = Vec::with_capacity(n_eff);
            let mut vectors = Vec::with_capacity(n_eff);
            for _ in 0..n_eff {
                let slate = generator.generate(user, rng)?;
                vectors.push(
                    slate
                        .items()
                        .iter()
                        .map(|&i| bank.item(i).to_vec())
                        .collect(),
                );
                slates.push(slate);
            }
            groups.push(UserSamples {
                user,
                slates,
                vectors,
            });
        }
        Ok(SampleSet { groups })
    }

    /// A single anonymous group built from raw item vectors.
    pub fn from_vectors(slates: Vec<Vec<Vec<f64>>>) -> SampleSet {
        SampleSet {
            groups: vec![UserSamples {
                user: None,
                slates: Vec::new(),
                vectors: slates,
            }],
        }
    }

    pub fn groups(&self) -> &[UserSamples] {
        &self.groups
    }

    pub fn samples_per_user(&self) -> usize {
        self.groups.first().map_or(0, |g| g.vectors.len())
    }
}

/// The three addends of the item-variance identity
/// `total = slate_mean + intra_slate`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceDecomposition {
    pub total: f64,
    pub slate_mean: f64,
    pub intra_slate: f64,
}

fn group_variance(vectors: &[Vec<Vec<f64>>]) -> Result<VarianceDecomposition> {
    let n = vectors.len();
    if n == 0 || vectors.iter().any(|s| s.is_empty()) {
        return Err(Error::Empty("variance needs at least one non-empty slate".into()));
    }
    let dim = vectors[0][0].len();
    let total_items: usize = vectors.iter().map(|s| s.len()).sum();

    let mut grand = vec![0.0; dim];
    for slate in vectors {
        for item in slate {
            for (g, x) in grand.iter_mut().zip(item) {
                *g += x;
            }
        }
    }
    for g in grand.iter_mut() {
        *g /= total_items as f64;
    }

    let mut total = 0.0;
    let mut slate_mean = 0.0;
    let mut intra = 0.0;
    for slate in vectors {
        let k = slate.len() as f64;
        let mut centroid = vec![0.0; dim];
        for item in slate {
            for (c, x) in centroid.iter_mut().zip(item) {
                *c += x / k;
            }
        }
        slate_mean += dist2(&centroid, &grand);
        for item in slate {
            total += dist2(item, &grand);
            intra += dist2(item, &centroid);
        }
    }
    Ok(VarianceDecomposition {
        total: total / total_items as f64,
        slate_mean: slate_mean / n as f64,
        intra_slate: intra / total_items as f64,
    })
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Empirical item variance split into slate-mean and intra-slate parts,
/// computed per user group and averaged.
pub fn variance_decomposition(samples: &SampleSet) -> Result<VarianceDecomposition> {
    if samples.groups.is_empty() {
        return Err(Error::Empty("empty sample set".into()));
    }
    let mut total = 0.0;
    let mut slate_mean = 0.0;
    let mut intra = 0.0;
    for group in &samples.groups {
        let v = group_variance(&group.vectors)?;
        total += v.total;
        slate_mean += v.slate_mean;
        intra += v.intra_slate;
    }
    let g = samples.groups.len() as f64;
    Ok(VarianceDecomposition {
        total: total / g,
        slate_mean: slate_mean / g,
        intra_slate: intra / g,
    })
}

/// Expected number of clicks of a generator: per user, the mean analytic
/// `expected_clicks` over N generated slates (one for deterministic
/// rankers), then averaged over users.
pub fn enc(
    generator: &dyn SlateGenerator,
    env: &Environment,
    users: &[Option<UserId>],
    n: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<f64> {
    if users.is_empty() {
        return Err(Error::Empty("ENC needs at least one user".into()));
    }
    let n_eff = if generator.is_deterministic() { 1 } else { n.max(1) };
    let mut user_total = 0.0;
    for &user in users {
        let mut acc = 0.0;
        for _ in 0..n_eff {
            let slate = generator.generate(user, rng)?;
            acc += env.expected_clicks(&slate, user)?;
        }
        user_total += acc / n_eff as f64;
    }
    Ok(user_total / users.len() as f64)
}

/// ENC over an existing sample set.
pub fn enc_of_samples(samples: &SampleSet, env: &Environment) -> Result<f64> {
    let mut user_total = 0.0;
    for group in &samples.groups {
        if group.slates.is_empty() {
            return Err(Error::Empty("sample set has no item ids".into()));
        }
        let mut acc = 0.0;
        for slate in &group.slates {
            acc += env.expected_clicks(slate, group.user)?;
        }
        user_total += acc / group.slates.len() as f64;
    }
    Ok(user_total / self_len(samples))
}

fn self_len(samples: &SampleSet) -> f64 {
    samples.groups.len() as f64
}

/// Fraction of the catalog appearing across a user's sampled slates,
/// averaged user-wise.
pub fn coverage(samples: &SampleSet, n_items: usize) -> Result<f64> {
    if n_items == 0 {
        return Err(Error::Contract("coverage needs a non-empty catalog".into()));
    }
    let mut acc = 0.0;
    for group in &samples.groups {
        if group.slates.is_empty() {
            return Err(Error::Empty("sample set has no item ids".into()));
        }
        let mut seen = vec![false; n_items];
        let mut distinct = 0usize;
        for slate in &group.slates {
            for &item in slate.items() {
                if !seen[item] {
                    seen[item] = true;
                    distinct += 1;
                }
            }
        }
        acc += distinct as f64 / n_items as f64;
    }
    Ok(acc / self_len(samples))
}

/// Intra-list diversity with pairwise-mean normalization:
/// `1 - (1 / (K(K-1))) * sum_{i != l} sigmoid(v_i . v_l)`.
pub fn ild(slate: &Slate, bank: &EmbeddingBank) -> Result<f64> {
    ild_impl(slate, bank, true)
}

/// The literal unnormalized form, `1 - sum_{i != l} sigmoid(v_i . v_l)`;
/// can go below zero for K > 1.
pub fn ild_raw(slate: &Slate, bank: &EmbeddingBank) -> Result<f64> {
    ild_impl(slate, bank, false)
}

fn ild_impl(slate: &Slate, bank: &EmbeddingBank, normalize: bool) -> Result<f64> {
    let k = slate.len();
    if k < 2 {
        return Err(Error::Contract("ILD needs at least two slots".into()));
    }
    let mut acc = 0.0;
    for i in 0..k {
        for l in 0..k {
            if i != l {
                acc += bank.item_similarity(slate.get(i), slate.get(l));
            }
        }
    }
    if normalize {
        acc /= (k * (k - 1)) as f64;
    }
    Ok(1.0 - acc)
}

/// Mean and standard deviation of ILD over every sampled slate.
pub fn ild_over_samples(samples: &SampleSet, bank: &EmbeddingBank) -> Result<(f64, f64)> {
    let mut values = Vec::new();
    for group in &samples.groups {
        if group.slates.is_empty() {
            return Err(Error::Empty("sample set has no item ids".into()));
        }
        for slate in &group.slates {
            values.push(ild(slate, bank)?);
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

fn record_positives(record: &Record) -> Vec<usize> {
    let mut positives: Vec<usize> = record
        .slate
        .items()
        .iter()
        .zip(record.response.bits())
        .filter_map(|(&item, &bit)| (bit == 1).then_some(item))
        .collect();
    positives.sort_unstable();
    positives.dedup();
    positives
}

fn hit_recall_of_slate(generated: &Slate, positives: &[usize]) -> (f64, f64) {
    let mut matched = 0usize;
    for &p in positives {
        if generated.items().contains(&p) {
            matched += 1;
        }
    }
    let hit = f64::from(matched > 0);
    (hit, matched as f64 / positives.len() as f64)
}

/// Slate hit rate and recall on held-out slates: a hit when any generated
/// item matches a positively-responded ground-truth item; recall is the
/// matched fraction of that slate's positives. Slates without positives are
/// excluded from both denominators.
pub fn hit_and_recall(
    generator: &dyn SlateGenerator,
    test: &Dataset,
    n: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<(f64, f64)> {
    let n_eff = if generator.is_deterministic() { 1 } else { n.max(1) };
    let mut hit_acc = 0.0;
    let mut recall_acc = 0.0;
    let mut counted = 0usize;
    for record in &test.records {
        let positives = record_positives(record);
        if positives.is_empty() {
            continue;
        }
        let mut hit = 0.0;
        let mut recall = 0.0;
        for _ in 0..n_eff {
            let slate = generator.generate(record.user, rng)?;
            let (h, r) = hit_recall_of_slate(&slate, &positives);
            hit += h;
            recall += r;
        }
        hit_acc += hit / n_eff as f64;
        recall_acc += recall / n_eff as f64;
        counted += 1;
    }
    if counted == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((hit_acc / counted as f64, recall_acc / counted as f64))
}

/// Hit/recall computed against the already-sampled slates of each record's
/// user. Records whose user has no sample group are skipped.
pub fn hit_and_recall_from_samples(samples: &SampleSet, test: &Dataset) -> Result<(f64, f64)> {
    let mut hit_acc = 0.0;
    let mut recall_acc = 0.0;
    let mut counted = 0usize;
    for record in &test.records {
        let positives = record_positives(record);
        if positives.is_empty() {
            continue;
        }
        let Some(group) = samples.groups.iter().find(|g| g.user == record.user) else {
            continue;
        };
        if group.slates.is_empty() {
            return Err(Error::Empty("sample set has no item ids".into()));
        }
        let mut hit = 0.0;
        let mut recall = 0.0;
        for slate in &group.slates {
            let (h, r) = hit_recall_of_slate(slate, &positives);
            hit += h;
            recall += r;
        }
        hit_acc += hit / group.slates.len() as f64;
        recall_acc += recall / group.slates.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((hit_acc / counted as f64, recall_acc / counted as f64))
}

/// Replace `a` distinct random positions of the slate by similarity-weighted
/// multinomial draws relative to the original items there.
pub fn perturb_items(
    slate: &Slate,
    a: usize,
    bank: &EmbeddingBank,
    rng: &mut dyn rand::RngCore,
) -> Slate {
    let mut out = slate.clone();
    if a == 0 {
        return out;
    }
    let k = slate.len();
    let positions = rand::seq::index::sample(&mut WrapRng(rng), k, a.min(k)).into_vec();
    for pos in positions {
        let pick = multinomial_similar_item(bank, slate.get(pos), 1.0, rng);
        out.set(pos, pick);
    }
    out
}

// rand::seq::index::sample needs a sized Rng; wrap the dyn reference.
struct WrapRng<'a>(&'a mut dyn rand::RngCore);

impl rand::RngCore for WrapRng<'_> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}

/// One histogram cell of the perturbation study.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationBin {
    /// Observed click count of the source slates.
    pub group: usize,
    /// Number of perturbed items.
    pub a: usize,
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
}

/// For each observed-click group and each `a`, perturb `a` random items of
/// every record and histogram the resulting expected clicks over `[0, K]`.
pub fn perturbation_study(
    d: &Dataset,
    env: &Environment,
    bank: &EmbeddingBank,
    a_values: &[usize],
    bins: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<Vec<PerturbationBin>> {
    if bins == 0 {
        return Err(Error::Contract("need at least one histogram bin".into()));
    }
    let k = d.slate_size;
    if a_values.iter().any(|&a| a > k) {
        return Err(Error::Contract(format!("a values must lie in 0..={k}")));
    }
    let width = k as f64 / bins as f64;
    let mut counts = vec![0usize; (k + 1) * a_values.len() * bins];
    for record in &d.records {
        let group = record.response.clicks();
        for (ai, &a) in a_values.iter().enumerate() {
            let perturbed = perturb_items(&record.slate, a, bank, rng);
            let value = env.expected_clicks(&perturbed, record.user)?;
            let bin = ((value / width) as usize).min(bins - 1);
            counts[(group * a_values.len() + ai) * bins + bin] += 1;
        }
    }
    let mut out = Vec::new();
    for group in 0..=k {
        for (ai, &a) in a_values.iter().enumerate() {
            for b in 0..bins {
                let count = counts[(group * a_values.len() + ai) * bins + b];
                out.push(PerturbationBin {
                    group,
                    a,
                    bin_low: b as f64 * width,
                    bin_high: (b + 1) as f64 * width,
                    count,
                });
            }
        }
    }
    Ok(out)
}

/// Mean |ENC(perturbed) - ENC(original)| over `trials` records drawn with
/// replacement from the given records.
pub fn mean_abs_enc_shift(
    records: &[&Record],
    env: &Environment,
    bank: &EmbeddingBank,
    a: usize,
    trials: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("no records to perturb".into()));
    }
    let mut acc = 0.0;
    let mut r = WrapRng(rng);
    for _ in 0..trials {
        let record = records[r.gen_range(0..records.len())];
        let original = env.expected_clicks(&record.slate, record.user)?;
        let perturbed = perturb_items(&record.slate, a, bank, &mut r);
        let shifted = env.expected_clicks(&perturbed, record.user)?;
        acc += (shifted - original).abs();
    }
    Ok(acc / trials as f64)
}

/// Everything the report CSV carries for one evaluated model.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub enc: f64,
    pub total_var: f64,
    pub slate_mean_var: f64,
    pub intra_slate_var: f64,
    pub coverage: f64,
    pub ild_mean: f64,
    pub ild_std: f64,
    pub hit_rate: f64,
    pub recall: f64,
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "enc,total_item_variance,slate_mean_variance,intra_slate_variance,\
         item_coverage,ild,ild_std,slate_hit_rate,slate_recall"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.enc,
            self.total_var,
            self.slate_mean_var,
            self.intra_slate_var,
            self.coverage,
            self.ild_mean,
            self.ild_std,
            self.hit_rate,
            self.recall
        )
    }
}

/// Full evaluation of one generator: sample N slates per user, then compute
/// every metric from that one sample set (hit/recall against the test set).
pub fn evaluate_generator(
    generator: &dyn SlateGenerator,
    env: &Environment,
    bank: &EmbeddingBank,
    users: &[Option<UserId>],
    test: &Dataset,
    n: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<MetricsReport> {
    let samples = SampleSet::generate(generator, bank, users, n, rng)?;
    let variance = variance_decomposition(&samples)?;
    let (ild_mean, ild_std) = ild_over_samples(&samples, bank)?;
    let (hit_rate, recall) = hit_and_recall_from_samples(&samples, test)?;
    Ok(MetricsReport {
        enc: enc_of_samples(&samples, env)?,
        total_var: variance.total,
        slate_mean_var: variance.slate_mean,
        intra_slate_var: variance.intra_slate,
        coverage: coverage(&samples, bank.n_items())?,
        ild_mean,
        ild_std,
        hit_rate,
        recall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::ResponseVector;
    use crate::numkit::{sigmoid, Tensor2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_dim(vals: &[f64]) -> Vec<Vec<f64>> {
        vals.iter().map(|&v| vec![v]).collect()
    }

    #[test]
    fn variance_hand_example() {
        // two slates of two one-dim items: {0,2} and {4,6}
        let set = SampleSet::from_vectors(vec![one_dim(&[0.0, 2.0]), one_dim(&[4.0, 6.0])]);
        let v = variance_decomposition(&set).unwrap();
        assert_eq!(v.total, 5.0);
        assert_eq!(v.slate_mean, 4.0);
        assert_eq!(v.intra_slate, 1.0);
    }

    #[test]
    fn variance_all_identical_is_zero() {
        let set = SampleSet::from_vectors(vec![
            one_dim(&[3.0, 3.0]),
            one_dim(&[3.0, 3.0]),
            one_dim(&[3.0, 3.0]),
        ]);
        let v = variance_decomposition(&set).unwrap();
        assert_eq!((v.total, v.slate_mean, v.intra_slate), (0.0, 0.0, 0.0));
    }

    #[test]
    fn variance_identity_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.gen_range(1..=20);
            let slates: Vec<Vec<Vec<f64>>> = (0..n)
                .map(|_| (0..5).map(|_| (0..8).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect()).collect())
                .collect();
            let set = SampleSet::from_vectors(slates);
            let v = variance_decomposition(&set).unwrap();
            let sum = v.slate_mean + v.intra_slate;
            let rel = (v.total - sum).abs() / v.total.abs().max(1e-12);
            assert!(rel < 1e-9, "identity violated: {v:?}");
            assert!(v.slate_mean <= v.total + 1e-12);
            assert!(v.intra_slate <= v.total + 1e-12);
        }
    }

    #[test]
    fn variance_empty_set_errors() {
        let set = SampleSet::from_vectors(vec![]);
        assert!(variance_decomposition(&set).is_err());
    }

    struct FixedPolicy(Slate);

    impl SlateGenerator for FixedPolicy {
        fn generate(&self, _user: Option<UserId>, _rng: &mut dyn rand::RngCore) -> Result<Slate> {
            Ok(self.0.clone())
        }
        fn is_deterministic(&self) -> bool {
            true
        }
    }

    struct UniformPolicy {
        n_items: usize,
        k: usize,
    }

    impl SlateGenerator for UniformPolicy {
        fn generate(&self, _user: Option<UserId>, rng: &mut dyn rand::RngCore) -> Result<Slate> {
            let mut r = WrapRng(rng);
            Ok(Slate::new((0..self.k).map(|_| r.gen_range(0..self.n_items)).collect()))
        }
    }

    fn toy_env(n_items: usize, seed: u64) -> Environment {
        let mut config = crate::simenv::SimConfig::new(n_items, 3, seed);
        config.relation_weight = 0.5;
        crate::simenv::build_environment(crate::simenv::EnvKind::UrmPMr, &config).unwrap()
    }

    #[test]
    fn enc_of_fixed_slate_is_expected_clicks() {
        let env = toy_env(10, 3);
        let slate = Slate::new(vec![0, 1, 2, 3, 4]);
        let policy = FixedPolicy(slate.clone());
        let users = [Some(0), Some(1)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = enc(&policy, &env, &users, 100, &mut rng).unwrap();
        let expect = (env.expected_clicks(&slate, Some(0)).unwrap()
            + env.expected_clicks(&slate, Some(1)).unwrap())
            / 2.0;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn enc_uniform_policy_matches_exhaustive_enumeration() {
        // 6 items, K = 5: brute force the mean expected_clicks over all 6^5
        // ordered slates and compare to the Monte-Carlo estimate.
        let env = toy_env(6, 4);
        let user = Some(1);
        let mut brute = 0.0;
        let mut count = 0usize;
        let mut per_slate_var = 0.0;
        let mut values = Vec::new();
        for a in 0..6 {
            for b in 0..6 {
                for c in 0..6 {
                    for d in 0..6 {
                        for e in 0..6 {
                            let s = Slate::new(vec![a, b, c, d, e]);
                            let v = env.expected_clicks(&s, user).unwrap();
                            brute += v;
                            values.push(v);
                            count += 1;
                        }
                    }
                }
            }
        }
        brute /= count as f64;
        for v in &values {
            per_slate_var += (v - brute) * (v - brute);
        }
        per_slate_var /= count as f64;

        let n = 10_000usize;
        let policy = UniformPolicy { n_items: 6, k: 5 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let got = enc(&policy, &env, &[user], n, &mut rng).unwrap();
        let sigma = (per_slate_var / n as f64).sqrt();
        assert!(
            (got - brute).abs() < 3.0 * sigma,
            "got {got}, brute {brute}, 3sigma {}",
            3.0 * sigma
        );
    }

    #[test]
    fn enc_mixture_linearity() {
        // a generator that flips between two fixed slates with weight p
        struct Mixture {
            a: Slate,
            b: Slate,
            p: f64,
        }
        impl SlateGenerator for Mixture {
            fn generate(&self, _u: Option<UserId>, rng: &mut dyn rand::RngCore) -> Result<Slate> {
                let mut r = WrapRng(rng);
                Ok(if r.gen::<f64>() < self.p {
                    self.a.clone()
                } else {
                    self.b.clone()
                })
            }
        }
        let env = toy_env(10, 5);
        let a = Slate::new(vec![0, 1, 2, 3, 4]);
        let b = Slate::new(vec![5, 6, 7, 8, 9]);
        let p = 0.25;
        let mix = Mixture { a: a.clone(), b: b.clone(), p };
        let user = Some(2);
        let n = 200_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let got = enc(&mix, &env, &[user], n, &mut rng).unwrap();
        let ea = env.expected_clicks(&a, user).unwrap();
        let eb = env.expected_clicks(&b, user).unwrap();
        let expect = p * ea + (1.0 - p) * eb;
        let sigma = ((ea - eb).abs() / 2.0) / (n as f64).sqrt() * 2.0 + 1e-9;
        assert!((got - expect).abs() < 4.0 * sigma, "got {got} expect {expect}");
    }

    #[test]
    fn coverage_of_deterministic_policy_is_k_over_catalog() {
        let bank = EmbeddingBank::new(
            Tensor2::randn(100, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(1)),
            None,
        );
        let policy = FixedPolicy(Slate::new(vec![4, 9, 13, 44, 77]));
        let users = [None];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples = SampleSet::generate(&policy, &bank, &users, 500, &mut rng).unwrap();
        assert_eq!(samples.samples_per_user(), 1);
        assert_eq!(coverage(&samples, 100).unwrap(), 5.0 / 100.0);
    }

    #[test]
    fn coverage_counts_distinct_items() {
        let bank = EmbeddingBank::new(
            Tensor2::randn(100, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(1)),
            None,
        );
        struct TwoSlates {
            flip: std::cell::Cell<bool>,
        }
        impl SlateGenerator for TwoSlates {
            fn generate(&self, _u: Option<UserId>, _rng: &mut dyn rand::RngCore) -> Result<Slate> {
                let first = self.flip.get();
                self.flip.set(!first);
                Ok(if first {
                    Slate::new(vec![1, 2, 3, 4, 5])
                } else {
                    Slate::new(vec![4, 5, 6, 7, 8])
                })
            }
        }
        let policy = TwoSlates { flip: std::cell::Cell::new(true) };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples = SampleSet::generate(&policy, &bank, &[None], 2, &mut rng).unwrap();
        assert_eq!(coverage(&samples, 100).unwrap(), 8.0 / 100.0);
    }

    #[test]
    fn coverage_monotone_in_n() {
        let bank = EmbeddingBank::new(
            Tensor2::randn(60, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(2)),
            None,
        );
        let policy = UniformPolicy { n_items: 60, k: 5 };
        let mut prev = 0.0;
        for n in [1usize, 5, 20, 60] {
            // seed-prefix property: same seed, growing N
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let samples = SampleSet::generate(&policy, &bank, &[None], n, &mut rng).unwrap();
            let c = coverage(&samples, 60).unwrap();
            assert!(c >= prev, "coverage dropped from {prev} to {c} at n={n}");
            prev = c;
        }
        // uniform generator with N*K >= catalog approaches full coverage
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let samples = SampleSet::generate(&policy, &bank, &[None], 400, &mut rng).unwrap();
        assert!(coverage(&samples, 60).unwrap() > 0.95);
    }

    #[test]
    fn ild_identical_and_orthogonal_items() {
        // all items share the zero embedding: similarity sigmoid(0) = 0.5
        let bank = EmbeddingBank::new(Tensor2::zeros(3, 4), None);
        let slate = Slate::new(vec![0, 1, 2]);
        assert!((ild(&slate, &bank).unwrap() - 0.5).abs() < 1e-12);

        // mutually orthogonal embeddings: all pairwise dots are 0
        let mut t = Tensor2::zeros(3, 3);
        t.set(0, 0, 1.0);
        t.set(1, 1, 1.0);
        t.set(2, 2, 1.0);
        let bank = EmbeddingBank::new(t, None);
        assert!((ild(&slate, &bank).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ild_anti_aligned_pairs_approach_one() {
        // two items with dot = -10
        let t = Tensor2::from_vec(2, 1, vec![10.0f64.sqrt(), -(10.0f64.sqrt())]).unwrap();
        let bank = EmbeddingBank::new(t, None);
        let slate = Slate::new(vec![0, 1]);
        let got = ild(&slate, &bank).unwrap();
        assert!((got - (1.0 - sigmoid(-10.0))).abs() < 1e-12);
        assert!(got > 0.9999);
    }

    #[test]
    fn ild_permutation_invariant_and_raw_form() {
        let t = Tensor2::randn(6, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let bank = EmbeddingBank::new(t, None);
        let a = Slate::new(vec![0, 2, 4, 1, 5]);
        let b = Slate::new(vec![5, 4, 2, 1, 0]);
        assert!((ild(&a, &bank).unwrap() - ild(&b, &bank).unwrap()).abs() < 1e-12);
        // raw = 1 - K(K-1) * (1 - normalized)
        let raw = ild_raw(&a, &bank).unwrap();
        let norm = ild(&a, &bank).unwrap();
        assert!((raw - (1.0 - 20.0 * (1.0 - norm))).abs() < 1e-9);
    }

    #[test]
    fn hit_and_recall_hand_tally() {
        let mut test = Dataset::new(20, 5);
        // record 1: positives {1, 2}; record 2: positives {10}; record 3: none
        test.push(Record {
            user: None,
            slate: Slate::new(vec![1, 2, 3, 4, 5]),
            response: ResponseVector::new(vec![1, 1, 0, 0, 0]).unwrap(),
        })
        .unwrap();
        test.push(Record {
            user: None,
            slate: Slate::new(vec![10, 11, 12, 13, 14]),
            response: ResponseVector::new(vec![1, 0, 0, 0, 0]).unwrap(),
        })
        .unwrap();
        test.push(Record {
            user: None,
            slate: Slate::new(vec![6, 7, 8, 9, 15]),
            response: ResponseVector::new(vec![0, 0, 0, 0, 0]).unwrap(),
        })
        .unwrap();
        // generator always emits [1, 16, 17, 18, 19]: hits record 1 only,
        // recall 1/2 there; record 3 is excluded.
        let policy = FixedPolicy(Slate::new(vec![1, 16, 17, 18, 19]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (hit, recall) = hit_and_recall(&policy, &test, 10, &mut rng).unwrap();
        assert!((hit - 0.5).abs() < 1e-12);
        assert!((recall - 0.25).abs() < 1e-12);
    }

    #[test]
    fn perfect_generation_has_hit_and_recall_one() {
        let mut test = Dataset::new(10, 5);
        let slate = Slate::new(vec![0, 1, 2, 3, 4]);
        test.push(Record {
            user: None,
            slate: slate.clone(),
            response: ResponseVector::ideal(5),
        })
        .unwrap();
        let policy = FixedPolicy(slate);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (hit, recall) = hit_and_recall(&policy, &test, 3, &mut rng).unwrap();
        assert_eq!((hit, recall), (1.0, 1.0));
    }

    #[test]
    fn perturb_zero_items_is_identity() {
        let bank = EmbeddingBank::new(
            Tensor2::randn(20, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(5)),
            None,
        );
        let slate = Slate::new(vec![0, 5, 10, 15, 19]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(perturb_items(&slate, 0, &bank, &mut rng), slate);
    }

    #[test]
    fn perturbation_study_row_count_and_a0_concentration() {
        let env = toy_env(30, 8);
        let bank = EmbeddingBank::from_environment(&env).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = crate::simenv::generate_dataset(&env, 300, &mut rng).unwrap();
        let a_values = [0usize, 1, 3];
        let bins = 10;
        let table = perturbation_study(&d, &env, &bank, &a_values, bins, &mut rng).unwrap();
        assert_eq!(table.len(), 6 * a_values.len() * bins);
        let total_a0: usize = table.iter().filter(|b| b.a == 0).map(|b| b.count).sum();
        assert_eq!(total_a0, d.len());
        for group in 0..=5usize {
            // with a=0 the expected clicks sit near the observed label
            let in_group: Vec<&PerturbationBin> = table
                .iter()
                .filter(|b| b.a == 0 && b.group == group)
                .collect();
            let total: usize = in_group.iter().map(|b| b.count).sum();
            if total == 0 {
                continue;
            }
            let near: usize = in_group
                .iter()
                .filter(|b| b.bin_low <= group as f64 + 1.0 && b.bin_high >= group as f64 - 1.0)
                .map(|b| b.count)
                .sum();
            assert!(
                near as f64 / total as f64 > 0.5,
                "group {group}: {near}/{total}"
            );
        }
    }

    #[test]
    fn enc_shift_zero_at_a_zero() {
        let env = toy_env(30, 9);
        let bank = EmbeddingBank::from_environment(&env).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = crate::simenv::generate_dataset(&env, 200, &mut rng).unwrap();
        let records: Vec<&Record> = d.records.iter().collect();
        let shift = mean_abs_enc_shift(&records, &env, &bank, 0, 500, &mut rng).unwrap();
        assert_eq!(shift, 0.0);
    }
}
