//! Evaluation procedures over a trained campaign: n-gram statistics, the
//! farthest-first versus closest-first similarity experiment, behaviour
//! targeting and crash summaries.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generator::{GeneratedString, Generator};
use crate::orchestrator::FuzzerState;
use crate::ranking::{cft_prefix, fft_prefix};
use crate::targets::{Outcome, TargetProgram};
use crate::vae::LatentVector;

pub type NgramSet<'a> = HashSet<&'a [u8]>;

/// All contiguous substrings of `s` with length in `n_min..=n_max`.
pub fn ngrams(s: &[u8], n_min: usize, n_max: usize) -> Result<NgramSet<'_>> {
    if n_min == 0 || n_min > n_max {
        return Err(Error::Undefined(format!("n-gram lengths {n_min}..={n_max}")));
    }
    let mut out = HashSet::new();
    for n in n_min..=n_max.min(s.len()) {
        out.extend(s.windows(n));
    }
    Ok(out)
}

/// `|A ∩ B| / |A ∪ B|`, zero when both are empty.
pub fn jaccard(a: &NgramSet<'_>, b: &NgramSet<'_>) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let inter = small.iter().filter(|g| large.contains(*g)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Lengths used by the similarity experiment.
pub const SIMILARITY_NGRAMS: (usize, usize) = (1, 10);

/// Mean over strings of the Jaccard similarity between each string's n-grams
/// and the union of n-grams over all the strings.
pub fn mean_self_similarity(strings: &[GeneratedString]) -> f64 {
    if strings.is_empty() {
        return 0.0;
    }
    let (lo, hi) = SIMILARITY_NGRAMS;
    let sets: Vec<NgramSet<'_>> = strings
        .iter()
        .map(|s| ngrams(s.as_bytes(), lo, hi).expect("valid range"))
        .collect();
    let union: NgramSet<'_> = sets.iter().flatten().copied().collect();
    sets.iter().map(|a| jaccard(a, &union)).sum::<f64>() / sets.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub mean_jaccard_fft: f64,
    pub mean_jaccard_cft: f64,
    pub repetitions: usize,
    pub fft: Vec<f64>,
    pub cft: Vec<f64>,
}

impl SimilarityReport {
    /// Repetitions in which the farthest-first head was the less self-similar.
    pub fn fft_below_cft(&self) -> usize {
        self.fft.iter().zip(&self.cft).filter(|(f, c)| f < c).count()
    }
}

/// Seed for sampling the string of one latent vector, so the same vector
/// always yields the same string.
fn latent_seed(z: &LatentVector) -> u64 {
    let d = Sha256::digest(z.to_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Samples one string per latent vector, each from its own latent-derived seed.
pub fn generate_seeded(gnn: &Generator<f32>, zs: &[LatentVector]) -> Result<Vec<GeneratedString>> {
    zs.iter()
        .map(|z| {
            let mut rng = ChaCha8Rng::seed_from_u64(latent_seed(z));
            Ok(gnn.generate(&[z], &mut rng)?.remove(0))
        })
        .collect()
}

fn standard_normal(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<LatentVector> {
    (0..n)
        .map(|_| LatentVector((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()))
        .collect()
}

/// Per repetition: draw `n` standard-normal latents, take the first `head` of
/// the farthest-first and closest-first orders, generate a string for each and
/// measure how alike each group's strings are.
pub fn latent_similarity_eval(
    gnn: &Generator<f32>,
    n: usize,
    head: usize,
    reps: usize,
    rng: &mut impl Rng,
) -> Result<SimilarityReport> {
    if head < 2 || n < head {
        return Err(Error::Undefined(format!("need 2 <= head <= n, got head {head}, n {n}")));
    }
    let dim = gnn.spec().latent_dim;
    let (mut fft, mut cft) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
    for _ in 0..reps {
        let points = standard_normal(n, dim, rng);
        for (order, out) in [(fft_prefix(&points, head)?, &mut fft), (cft_prefix(&points, head)?, &mut cft)] {
            let zs: Vec<LatentVector> = order.entries.iter().map(|e| points[e.index].clone()).collect();
            out.push(mean_self_similarity(&generate_seeded(gnn, &zs)?));
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(SimilarityReport {
        mean_jaccard_fft: mean(&fft),
        mean_jaccard_cft: mean(&cft),
        repetitions: reps,
        fft,
        cft,
    })
}

/// `1 − a·b / (|a||b|)`, in `[0, 2]`.
pub fn cosine_distance(a: &LatentVector, b: &LatentVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("dimensions {} and {}", a.dim(), b.dim())));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.0.iter().zip(&b.0) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Undefined("cosine distance of a zero vector".into()));
    }
    Ok((1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 2.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetingReport {
    pub samples: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub distances: Vec<f64>,
}

impl TargetingReport {
    pub fn from_distances(distances: Vec<f64>) -> Self {
        let n = distances.len();
        if n == 0 {
            return TargetingReport {
                samples: 0,
                mean: 0.0,
                std_dev: 0.0,
                min: 0.0,
                median: 0.0,
                max: 0.0,
                distances,
            };
        }
        let mean = distances.iter().sum::<f64>() / n as f64;
        let var = distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        let mut sorted = distances.clone();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        TargetingReport {
            samples: n,
            mean,
            std_dev: var.sqrt(),
            min: sorted[0],
            median,
            max: sorted[n - 1],
            distances,
        }
    }
}

/// Feeds `n` random latents through generate, execute and embed, and reports
/// the cosine distance between each latent and the embedding it came back as.
pub fn behaviour_targeting_eval(state: &FuzzerState, n: usize, rng: &mut impl Rng) -> Result<TargetingReport> {
    let zs = standard_normal(n, state.config.latent_dim, rng);
    let refs: Vec<&LatentVector> = zs.iter().collect();
    let strings = state.gnn.generate(&refs, rng)?;
    let execs = strings
        .iter()
        .map(|s| state.execute(s.as_bytes()))
        .collect::<Result<Vec<_>>>()?;
    let traces: Vec<_> = execs.iter().map(|e| &e.trace).collect();
    let back = state.vae.embed_batch(&traces)?;
    let distances = zs
        .iter()
        .zip(&back)
        .map(|(z, z2)| cosine_distance(z, z2))
        .collect::<Result<Vec<_>>>()?;
    Ok(TargetingReport::from_distances(distances))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrashGroup {
    /// Hex sha256 of the shared trace.
    pub trace: String,
    pub detail: String,
    /// Inputs, lossily decoded for reading.
    pub inputs: Vec<String>,
    pub inputs_hex: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CrashReport {
    pub target: Option<TargetProgram>,
    pub archived: usize,
    /// Archived inputs that no longer crash when re-executed.
    pub not_reproduced: usize,
    pub groups: Vec<CrashGroup>,
}

/// Archived crashes grouped by identical trace, in order of first discovery.
/// Each input is re-executed and listed only if it still crashes.
pub fn crash_report(state: &FuzzerState) -> Result<CrashReport> {
    let mut report = CrashReport {
        target: Some(state.config.target),
        archived: state.crashes.len(),
        ..Default::default()
    };
    let mut group_of: HashMap<[u8; 32], usize> = HashMap::new();
    for c in &state.crashes {
        let again = state.execute(&c.input)?;
        if again.outcome != Outcome::Crash {
            report.not_reproduced += 1;
            continue;
        }
        let digest = again.trace.digest();
        let g = *group_of.entry(digest).or_insert_with(|| {
            report.groups.push(CrashGroup {
                trace: hex::encode(digest),
                detail: again.detail.clone(),
                inputs: Vec::new(),
                inputs_hex: Vec::new(),
            });
            report.groups.len() - 1
        });
        report.groups[g].inputs.push(String::from_utf8_lossy(&c.input).into_owned());
        report.groups[g].inputs_hex.push(hex::encode(&c.input));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramCount {
    pub length: usize,
    pub rank: usize,
    pub ngram: Vec<u8>,
    pub count: usize,
}

/// The `top` most frequent n-grams of each length over all `strings`,
/// counting every occurrence. Ties are broken by byte order.
pub fn ngram_frequencies(strings: &[&[u8]], n_min: usize, n_max: usize, top: usize) -> Result<Vec<NgramCount>> {
    if n_min == 0 || n_min > n_max {
        return Err(Error::Undefined(format!("n-gram lengths {n_min}..={n_max}")));
    }
    let mut out = Vec::new();
    for n in n_min..=n_max {
        let mut counts: HashMap<&[u8], usize> = HashMap::new();
        for s in strings {
            for w in s.windows(n) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&[u8], usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        out.extend(ranked.into_iter().take(top).enumerate().map(|(i, (g, c))| NgramCount {
            length: n,
            rank: i + 1,
            ngram: g.to_vec(),
            count: c,
        }));
    }
    Ok(out)
}

/// CSV with columns `length,rank,count,ngram,ngram_hex`; the `ngram` column
/// shows the bytes with non-printables escaped.
pub fn ngram_csv(rows: &[NgramCount]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["length", "rank", "count", "ngram", "ngram_hex"]).unwrap();
    for r in rows {
        w.write_record([
            r.length.to_string(),
            r.rank.to_string(),
            r.count.to_string(),
            r.ngram.escape_ascii().to_string(),
            hex::encode(&r.ngram),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::{init_state, tests::tiny_config};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn set<'a>(items: &[&'a str]) -> NgramSet<'a> {
        items.iter().map(|s| s.as_bytes()).collect()
    }

    #[test]
    fn ngram_examples() {
        assert_eq!(ngrams(b"abab", 2, 3).unwrap(), set(&["ab", "ba", "aba", "bab"]));
        assert!(ngrams(b"", 1, 10).unwrap().is_empty());
        assert!(ngrams(b"a", 2, 3).unwrap().is_empty());
        assert!(ngrams(b"abc", 0, 2).is_err());
        assert!(ngrams(b"abc", 3, 2).is_err());
    }

    #[test]
    fn jaccard_examples() {
        let a = set(&["a", "b"]);
        assert_eq!(jaccard(&a, &a), 1.0);
        assert_eq!(jaccard(&a, &set(&["c"])), 0.0);
        assert!((jaccard(&a, &set(&["b", "c"])) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&set(&[]), &set(&[])), 0.0);
    }

    fn oracle_ngrams(s: &[u8], lo: usize, hi: usize) -> BTreeSet<Vec<u8>> {
        let mut out = BTreeSet::new();
        for i in 0..s.len() {
            for j in i + 1..=s.len() {
                if (lo..=hi).contains(&(j - i)) {
                    out.insert(s[i..j].to_vec());
                }
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn ngrams_and_jaccard_match_oracle(
            a in proptest::collection::vec(0u8..4, 0..64),
            b in proptest::collection::vec(0u8..4, 0..64),
            lo in 1usize..5,
            span in 0usize..6,
        ) {
            let hi = lo + span;
            let (sa, sb) = (ngrams(&a, lo, hi).unwrap(), ngrams(&b, lo, hi).unwrap());
            let (oa, ob) = (oracle_ngrams(&a, lo, hi), oracle_ngrams(&b, lo, hi));
            prop_assert_eq!(sa.iter().map(|g| g.to_vec()).collect::<BTreeSet<_>>(), oa.clone());
            prop_assert!(sa.iter().all(|g| (lo..=hi).contains(&g.len())));
            let union = oa.union(&ob).count();
            let expected = if union == 0 { 0.0 } else { oa.intersection(&ob).count() as f64 / union as f64 };
            let j = jaccard(&sa, &sb);
            prop_assert!((j - expected).abs() < 1e-12);
            prop_assert_eq!(j, jaccard(&sb, &sa));
            prop_assert!((0.0..=1.0).contains(&j));
            if !sa.is_empty() {
                prop_assert_eq!(j == 1.0, sa == sb);
            }
        }

        #[test]
        fn cosine_extremes(v in proptest::collection::vec(-10.0f32..10.0, 1..20)) {
            prop_assume!(v.iter().any(|&x| x.abs() > 1e-3));
            let a = LatentVector(v.clone());
            let neg = LatentVector(v.iter().map(|x| -x).collect());
            prop_assert!(cosine_distance(&a, &a).unwrap().abs() < 1e-9);
            prop_assert!((cosine_distance(&a, &neg).unwrap() - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_examples() {
        let v = |x: &[f32]| LatentVector(x.to_vec());
        assert!(cosine_distance(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap() < 1e-12);
        assert!((cosine_distance(&v(&[1.0, 0.0]), &v(&[0.0, 3.0])).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_distance(&v(&[1.0, -1.0]), &v(&[-1.0, 1.0])).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(cosine_distance(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])), Err(Error::Undefined(_))));
    }

    #[test]
    fn perfect_targeting_has_zero_mean() {
        let r = TargetingReport::from_distances(vec![0.0; 10]);
        assert_eq!((r.mean, r.max, r.samples), (0.0, 0.0, 10));
        let r = TargetingReport::from_distances(vec![0.5, 1.5, 1.0, 2.0]);
        assert_eq!((r.min, r.median, r.max), (0.5, 1.25, 2.0));
    }

    #[test]
    fn zero_weight_generator_shows_no_direction() {
        let mut s = init_state(&tiny_config(TargetProgram::Json), 0).unwrap();
        s.gnn.params.zero_all();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = latent_similarity_eval(&s.gnn, 400, 20, 6, &mut rng).unwrap();
        assert_eq!(r.fft.len(), 6);
        let mean = r.fft.iter().sum::<f64>() / 6.0;
        assert!((mean - r.mean_jaccard_fft).abs() < 1e-12);
        // identical distributions: the means differ only by sampling noise
        let spread = r.fft.iter().chain(&r.cft).fold(0.0f64, |m, &x| m.max((x - mean).abs()));
        assert!((r.mean_jaccard_fft - r.mean_jaccard_cft).abs() <= spread + 1e-12);
        assert!((r.mean_jaccard_fft - r.mean_jaccard_cft).abs() < 0.02, "{r:?}");
    }

    #[test]
    fn similarity_eval_is_reproducible() {
        let s = init_state(&tiny_config(TargetProgram::Json), 0).unwrap();
        let run = |seed| latent_similarity_eval(&s.gnn, 60, 10, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(run(4), run(4));
        assert!(latent_similarity_eval(&s.gnn, 5, 10, 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn targeting_distances_are_in_range() {
        let s = init_state(&tiny_config(TargetProgram::Xmlite), 0).unwrap();
        let r = behaviour_targeting_eval(&s, 20, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(r.samples, 20);
        assert!(r.distances.iter().all(|d| (0.0..=2.0).contains(d)));
    }

    #[test]
    fn crash_report_groups_by_trace() {
        let mut s = init_state(&tiny_config(TargetProgram::Csub), 0).unwrap();
        assert!(crash_report(&s).unwrap().groups.is_empty());
        let fixture = TargetProgram::Csub.fault_fixture();
        s.crashes.push(s.execute(fixture).unwrap());
        let r = crash_report(&s).unwrap();
        assert_eq!(r.groups.len(), 1);
        assert_eq!(r.groups[0].inputs_hex, vec![hex::encode(fixture)]);
        // a second input with the same path through the parser joins the group
        s.crashes.push(s.execute(b"int y = 1;\n();\n").unwrap());
        s.crashes.push(s.execute(b"();").unwrap());
        let r = crash_report(&s).unwrap();
        assert_eq!(r.archived, 3);
        assert_eq!(r.groups.iter().map(|g| g.inputs.len()).sum::<usize>(), 3);
        assert_eq!(r.groups.len(), 2);
        // a stale archive entry is counted, not listed
        s.crashes.push(s.execute(b"x = 1;").unwrap());
        assert_eq!(crash_report(&s).unwrap().not_reproduced, 1);
    }

    #[test]
    fn ngram_frequency_table() {
        let rows = ngram_frequencies(&[b"abab", b"ab"], 1, 2, 2).unwrap();
        let flat: Vec<(usize, &[u8], usize)> = rows.iter().map(|r| (r.length, r.ngram.as_slice(), r.count)).collect();
        assert_eq!(flat, vec![(1, &b"a"[..], 3), (1, b"b", 3), (2, b"ab", 3), (2, b"ba", 1)]);
        let csv = ngram_csv(&rows);
        assert!(csv.starts_with("length,rank,count,ngram,ngram_hex\n1,1,3,a,61\n"));
        let odd = ngram_csv(&ngram_frequencies(&[b"a,\n"], 3, 3, 1).unwrap());
        assert!(odd.contains("\"a,\\n\""), "{odd}");
    }
}
