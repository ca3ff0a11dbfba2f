//! The campaign loop: a generative pass that executes freshly sampled inputs,
//! a cull of the corpus to its `k` most spread-out behaviours, and a training
//! pass for both networks, repeated epoch after epoch.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{derive_seed, CampaignConfig};
use crate::error::{Error, Result};
use crate::generator::{perturb_input, GeneratedString, Generator, GnnExample, MseTerm};
use crate::nn::RmsProp;
use crate::persist;
use crate::ranking::{cull, Embedded};
use crate::targets::{ExecutionRecord, Harness, Outcome};
use crate::trace::CoverageTrace;
use crate::vae::{LatentVector, Vae};

/// Default number of quiet epochs before a campaign counts as stalled.
pub const STALL_WINDOW: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub input: GeneratedString,
    pub trace: CoverageTrace,
    /// Embedding of `trace` under the VAE as of the last refresh.
    pub latent: LatentVector,
    /// The perturbed latent the generator was given when it produced `input`.
    pub gnn_input: LatentVector,
    pub epoch_found: u64,
    pub outcome: Outcome,
}

impl CorpusRecord {
    /// Hex sha256 of the input bytes; names the record's files on disk.
    pub fn hash(&self) -> String {
        input_hash(self.input.as_bytes())
    }
}

impl Embedded for CorpusRecord {
    fn latent(&self) -> &LatentVector {
        &self.latent
    }
}

pub(crate) fn input_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// Number of completed epochs, counting this one.
    pub epoch: u64,
    pub generated: usize,
    /// Traces never observed before in this campaign.
    pub new_distinct_traces: usize,
    pub distinct_traces_total: usize,
    pub new_records: usize,
    pub corpus_size: usize,
    /// Mean over the pass's optimizer steps; zero when no steps ran.
    pub vae_loss: f64,
    pub gnn_loss: f64,
    pub gnn_cross_entropy: f64,
    pub crashes_this_epoch: usize,
    pub learning_rate: f64,
    pub wall_time_ms: u64,
}

impl EpochReport {
    /// The report with its timing zeroed, for replay comparisons.
    pub fn without_timing(&self) -> EpochReport {
        EpochReport {
            wall_time_ms: 0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct Rngs {
    pub stage: ChaCha8Rng,
    pub generate: ChaCha8Rng,
    pub train: ChaCha8Rng,
}

impl Rngs {
    fn from_seed(seed: u64) -> Self {
        Rngs {
            stage: ChaCha8Rng::seed_from_u64(derive_seed(seed, "stage")),
            generate: ChaCha8Rng::seed_from_u64(derive_seed(seed, "generate")),
            train: ChaCha8Rng::seed_from_u64(derive_seed(seed, "train")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FuzzerState {
    pub config: CampaignConfig,
    pub epoch: u64,
    pub corpus: Vec<CorpusRecord>,
    pub vae: Vae<f32>,
    pub gnn: Generator<f32>,
    /// Crashing executions in discovery order, one per distinct input.
    pub crashes: Vec<ExecutionRecord>,
    /// Latent inputs for the next generative pass, before noise.
    pub staged: Vec<LatentVector>,
    pub learning_rate: f64,
    pub lr_halved: bool,
    pub(crate) seen: BTreeSet<[u8; 32]>,
    pub(crate) rngs: Rngs,
    pub(crate) harness: Harness,
    pub(crate) opt: RmsProp,
    pub(crate) out_dir: Option<PathBuf>,
}

/// Fresh campaign state: untrained networks, empty corpus and a batch of
/// standard-normal latent inputs.
pub fn init_state(config: &CampaignConfig, seed: u64) -> Result<FuzzerState> {
    let config = CampaignConfig {
        seed,
        ..config.clone()
    };
    config.validate()?;
    let vae = Vae::new(config.vae_spec(), derive_seed(seed, "vae"))?;
    let gnn = Generator::new(config.generator_spec(), derive_seed(seed, "gnn"))?;
    let mut rngs = Rngs::from_seed(seed);
    let staged = (0..config.batch_size)
        .map(|_| {
            LatentVector(
                (0..config.latent_dim)
                    .map(|_| rngs.stage.sample::<f64, _>(StandardNormal) as f32)
                    .collect(),
            )
        })
        .collect();
    Ok(FuzzerState {
        harness: Harness::new(config.map_size, config.str_len_max)?,
        learning_rate: config.learning_rate,
        config,
        epoch: 0,
        corpus: Vec::new(),
        vae,
        gnn,
        crashes: Vec::new(),
        staged,
        lr_halved: false,
        seen: BTreeSet::new(),
        rngs,
        opt: RmsProp::default(),
        out_dir: None,
    })
}

impl FuzzerState {
    pub fn harness(&self) -> &Harness {
        &self.harness
    }

    /// Number of distinct traces observed over the whole campaign.
    pub fn distinct_traces(&self) -> usize {
        self.seen.len()
    }

    /// Makes every subsequent epoch persist itself under `dir`.
    pub fn persist_to(&mut self, dir: impl Into<PathBuf>) {
        self.out_dir = Some(dir.into());
    }

    pub fn output_dir(&self) -> Option<&Path> {
        self.out_dir.as_deref()
    }

    pub fn execute(&self, input: &[u8]) -> Result<ExecutionRecord> {
        self.harness.execute(self.config.target, input)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerativeOutcome {
    pub executions: Vec<ExecutionRecord>,
    pub new_records: usize,
    pub new_distinct_traces: usize,
    pub crashes: usize,
}

/// Generates, executes and embeds one input per staged latent. Records with a
/// trace not already in the corpus are appended; crashes are archived. Network
/// parameters are left untouched.
pub fn generative_pass(state: &mut FuzzerState) -> Result<GenerativeOutcome> {
    let sigma = state.config.input_noise_sigma;
    let inputs: Vec<LatentVector> = state
        .staged
        .iter()
        .map(|z| perturb_input(z, sigma, &mut state.rngs.generate))
        .collect();
    let refs: Vec<&LatentVector> = inputs.iter().collect();
    let strings = state.gnn.generate(&refs, &mut state.rngs.generate)?;

    let executions = strings
        .iter()
        .map(|s| state.execute(s.as_bytes()))
        .collect::<Result<Vec<_>>>()?;
    let traces: Vec<&CoverageTrace> = executions.iter().map(|e| &e.trace).collect();
    let latents = state.vae.embed_batch(&traces)?;

    let mut in_corpus: HashSet<[u8; 32]> = state.corpus.iter().map(|r| r.trace.digest()).collect();
    let mut archived: HashSet<Vec<u8>> = state.crashes.iter().map(|c| c.input.clone()).collect();
    let mut out = GenerativeOutcome::default();
    for (((exec, string), latent), z) in executions.iter().zip(strings).zip(latents).zip(inputs) {
        let digest = exec.trace.digest();
        if state.seen.insert(digest) {
            out.new_distinct_traces += 1;
        }
        if exec.outcome == Outcome::Crash {
            out.crashes += 1;
            if archived.insert(exec.input.clone()) {
                state.crashes.push(exec.clone());
            }
        }
        if in_corpus.insert(digest) {
            out.new_records += 1;
            state.corpus.push(CorpusRecord {
                input: string,
                trace: exec.trace.clone(),
                latent,
                gnn_input: z,
                epoch_found: state.epoch,
                outcome: exec.outcome,
            });
        }
    }
    out.executions = executions;
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainingSummary {
    pub vae_loss: f64,
    pub gnn_loss: f64,
    pub gnn_cross_entropy: f64,
    pub steps: usize,
}

/// `steps_per_pass` optimizer steps for each network on uniformly sampled
/// corpus minibatches. The generator learns to reproduce each record's input
/// from its noisy latent.
pub fn training_pass(state: &mut FuzzerState) -> Result<TrainingSummary> {
    let n = state.corpus.len();
    if n == 0 {
        return Err(Error::Undefined("training pass on an empty corpus".into()));
    }
    let cfg = &state.config;
    let steps = cfg.steps_per_pass;
    let batch = cfg.train_batch_size;
    let sigma = cfg.input_noise_sigma;
    let mse = MseTerm {
        weight: cfg.mse_weight,
        exponent: cfg.mse_exponent,
    };
    let lr = state.learning_rate;
    let rng = &mut state.rngs.train;
    let mut sum = TrainingSummary {
        steps,
        ..Default::default()
    };
    for _ in 0..steps {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let traces: Vec<&CoverageTrace> = idx.iter().map(|&i| &state.corpus[i].trace).collect();
        sum.vae_loss += state.vae.train_step(&traces, rng, lr, &state.opt)?.total;
    }
    for _ in 0..steps {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let noisy: Vec<LatentVector> = idx
            .iter()
            .map(|&i| perturb_input(&state.corpus[i].latent, sigma, rng))
            .collect();
        let examples: Vec<GnnExample<'_>> = idx
            .iter()
            .zip(&noisy)
            .map(|(&i, z)| GnnExample {
                z_input: z,
                target: &state.corpus[i].input,
                z_true: &state.corpus[i].latent,
            })
            .collect();
        let loss = state.gnn.train_step(&examples, mse, lr, &state.opt)?;
        sum.gnn_loss += loss.total;
        sum.gnn_cross_entropy += loss.cross_entropy;
    }
    if steps > 0 {
        let s = steps as f64;
        sum.vae_loss /= s;
        sum.gnn_loss /= s;
        sum.gnn_cross_entropy /= s;
    }
    Ok(sum)
}

/// Runs [`training_pass`]; on numerical instability restores the networks and
/// the training stream, halves the learning rate and retries, once per campaign.
fn training_with_rollback(state: &mut FuzzerState) -> Result<TrainingSummary> {
    let saved = (state.vae.params.clone(), state.gnn.params.clone(), state.rngs.train.clone());
    loop {
        match training_pass(state) {
            Err(Error::Instability(why)) => {
                (state.vae.params, state.gnn.params, state.rngs.train) = saved.clone();
                if state.lr_halved {
                    return Err(Error::Instability(why));
                }
                state.lr_halved = true;
                state.learning_rate /= 2.0;
            }
            other => return other,
        }
    }
}

/// Re-embeds every corpus trace under the current VAE.
pub fn refresh_latents(state: &mut FuzzerState) -> Result<()> {
    let traces: Vec<&CoverageTrace> = state.corpus.iter().map(|r| &r.trace).collect();
    let latents = state.vae.embed_batch(&traces)?;
    for (r, z) in state.corpus.iter_mut().zip(latents) {
        r.latent = z;
    }
    Ok(())
}

/// Stages the latents of `batch_size` uniformly drawn corpus records; noise is
/// added when the next generative pass consumes them.
fn stage_inputs(state: &mut FuzzerState) {
    let n = state.corpus.len();
    if n == 0 {
        return;
    }
    state.staged = (0..state.config.batch_size)
        .map(|_| state.corpus[state.rngs.stage.random_range(0..n)].latent.clone())
        .collect();
}

/// One full epoch. When the state has an output directory the epoch's
/// corpus, checkpoint and report are written there.
pub fn run_epoch(state: &mut FuzzerState) -> Result<EpochReport> {
    let start = Instant::now();
    let generated = generative_pass(state)?;
    state.corpus = cull(std::mem::take(&mut state.corpus), state.config.k)?;
    let losses = training_with_rollback(state)?;
    refresh_latents(state)?;
    stage_inputs(state);
    state.epoch += 1;
    let report = EpochReport {
        epoch: state.epoch,
        generated: generated.executions.len(),
        new_distinct_traces: generated.new_distinct_traces,
        distinct_traces_total: state.seen.len(),
        new_records: generated.new_records,
        corpus_size: state.corpus.len(),
        vae_loss: losses.vae_loss,
        gnn_loss: losses.gnn_loss,
        gnn_cross_entropy: losses.gnn_cross_entropy,
        crashes_this_epoch: generated.crashes,
        learning_rate: state.learning_rate,
        wall_time_ms: start.elapsed().as_millis() as u64,
    };
    if let Some(dir) = state.out_dir.clone() {
        persist::save_state(state, &dir)?;
        persist::append_report(&dir, &report)?;
    }
    Ok(report)
}

/// True iff the last `window` reports all found no new trace.
pub fn stall_check(reports: &[EpochReport], window: usize) -> bool {
    window > 0
        && reports.len() >= window
        && reports[reports.len() - window..].iter().all(|r| r.new_distinct_traces == 0)
}

/// Runs epochs until `config.epochs` have completed in total or, with
/// `stop_on_stall`, the campaign stalls. `on_report` sees each report.
pub fn run_campaign(state: &mut FuzzerState, mut on_report: impl FnMut(&EpochReport)) -> Result<Vec<EpochReport>> {
    let mut reports = Vec::new();
    while state.epoch < state.config.epochs as u64 {
        let r = run_epoch(state)?;
        on_report(&r);
        reports.push(r);
        if state.config.stop_on_stall && stall_check(&reports, state.config.stall_window) {
            break;
        }
    }
    Ok(reports)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::parse_config;
    use crate::targets::TargetProgram;
    use serde_json::json;

    /// A configuration small enough for unit tests.
    pub(crate) fn tiny_config(target: TargetProgram) -> CampaignConfig {
        let ov = |k: &str, v: serde_json::Value| (k.to_string(), v);
        parse_config(
            None,
            &[
                ov("target", json!(target.id())),
                ov("map_size", json!(256)),
                ov("vae_hidden", json!([32])),
                ov("deconv_blocks", json!(4)),
                ov("filters", json!(8)),
                ov("len0", json!(32)),
                ov("batch_size", json!(16)),
                ov("steps_per_pass", json!(3)),
                ov("k", json!(12)),
                ov("learning_rate", json!(1e-3)),
            ],
        )
        .unwrap()
    }

    #[test]
    fn init_is_seeded() {
        let c = tiny_config(TargetProgram::Json);
        let a = init_state(&c, 3).unwrap();
        let b = init_state(&c, 3).unwrap();
        assert_eq!(a.vae.params.digest(), b.vae.params.digest());
        assert_eq!(a.gnn.params.digest(), b.gnn.params.digest());
        assert_eq!(a.staged, b.staged);
        assert!(a.corpus.is_empty());
        assert_eq!(a.epoch, 0);
        let c2 = init_state(&c, 4).unwrap();
        assert_ne!(a.gnn.params.digest(), c2.gnn.params.digest());
    }

    #[test]
    fn staged_noise_is_standard_normal() {
        let c = CampaignConfig::default();
        let s = init_state(&c, 0).unwrap();
        assert_eq!(s.staged.len(), 64);
        // mean of 64 standard normals has standard error 1/8
        for d in 0..16 {
            let mean: f64 = s.staged.iter().map(|z| z.0[d] as f64).sum::<f64>() / 64.0;
            assert!(mean.abs() < 3.0 / 8.0, "dimension {d}: {mean}");
        }
        let all: Vec<f64> = s.staged.iter().flat_map(|z| z.0.iter().map(|&v| v as f64)).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (all.len() - 1) as f64;
        assert!(mean.abs() < 0.05 + 3.0 / 32.0);
        assert!((var - 1.0).abs() < 0.15, "{var}");
    }

    #[test]
    fn generative_pass_leaves_parameters_alone() {
        let mut s = init_state(&tiny_config(TargetProgram::Json), 1).unwrap();
        let before = (s.vae.params.digest(), s.gnn.params.digest());
        let out = generative_pass(&mut s).unwrap();
        assert_eq!(before, (s.vae.params.digest(), s.gnn.params.digest()));
        assert_eq!(out.executions.len(), 16);
        assert!(out.new_records <= 16 && out.new_records >= 1);
        assert_eq!(out.new_records, s.corpus.len());
        assert!(s.corpus.iter().any(|r| r.outcome == Outcome::Rejected));
        let digests: HashSet<_> = s.corpus.iter().map(|r| r.trace.digest()).collect();
        assert_eq!(digests.len(), s.corpus.len());
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let mut s = init_state(&tiny_config(TargetProgram::Json), 1).unwrap();
        generative_pass(&mut s).unwrap();
        s.config.steps_per_pass = 0;
        let before = (s.vae.params.digest(), s.gnn.params.digest());
        let sum = training_pass(&mut s).unwrap();
        assert_eq!(before, (s.vae.params.digest(), s.gnn.params.digest()));
        assert_eq!(sum.vae_loss, 0.0);
    }

    #[test]
    fn training_needs_a_corpus() {
        let mut s = init_state(&tiny_config(TargetProgram::Json), 1).unwrap();
        assert!(matches!(training_pass(&mut s), Err(Error::Undefined(_))));
    }

    #[test]
    fn epochs_advance_and_respect_k() {
        let mut s = init_state(&tiny_config(TargetProgram::Xmlite), 2).unwrap();
        let mut total = 0;
        for e in 1..=3 {
            let r = run_epoch(&mut s).unwrap();
            assert_eq!(r.epoch, e);
            assert_eq!(s.epoch, e);
            assert!(r.corpus_size <= 12);
            assert!(r.vae_loss.is_finite() && r.gnn_loss.is_finite());
            assert!(r.distinct_traces_total >= total);
            total = r.distinct_traces_total;
            let back: EpochReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
            assert_eq!(back, r);
        }
        assert_eq!(s.staged.len(), 16);
        for rec in &s.corpus {
            assert_eq!(rec.latent, s.vae.embed(&rec.trace).unwrap());
            assert_eq!(s.execute(rec.input.as_bytes()).unwrap().trace, rec.trace);
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let c = tiny_config(TargetProgram::Csub);
        let run = || {
            let mut s = init_state(&c, 9).unwrap();
            let reports: Vec<_> = (0..2).map(|_| run_epoch(&mut s).unwrap().without_timing()).collect();
            (reports, s.gnn.params.digest(), s.corpus)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn instability_halves_the_rate_once() {
        let mut s = init_state(&tiny_config(TargetProgram::Json), 1).unwrap();
        generative_pass(&mut s).unwrap();
        let before = s.gnn.params.digest();
        s.learning_rate = f64::INFINITY;
        let err = training_with_rollback(&mut s).unwrap_err();
        assert!(matches!(err, Error::Instability(_)), "{err}");
        assert!(s.lr_halved);
        assert_eq!(s.gnn.params.digest(), before);
    }

    fn report(new: usize) -> EpochReport {
        EpochReport {
            epoch: 0,
            generated: 0,
            new_distinct_traces: new,
            distinct_traces_total: 0,
            new_records: 0,
            corpus_size: 0,
            vae_loss: 0.0,
            gnn_loss: 0.0,
            gnn_cross_entropy: 0.0,
            crashes_this_epoch: 0,
            learning_rate: 0.0,
            wall_time_ms: 0,
        }
    }

    #[test]
    fn stall_examples() {
        let quiet: Vec<_> = (0..20).map(|_| report(0)).collect();
        assert!(stall_check(&quiet, STALL_WINDOW));
        let mut noisy = quiet.clone();
        noisy[7] = report(1);
        assert!(!stall_check(&noisy, STALL_WINDOW));
        assert!(!stall_check(&quiet[..19], STALL_WINDOW));
        let mut old = vec![report(5)];
        old.extend(quiet);
        assert!(stall_check(&old, STALL_WINDOW));
    }
}
