//! On-disk campaign directory.
//!
//! ```text
//! config.json            resolved configuration
//! state.json             epoch, learning rate, staged latents, seen traces, rng streams
//! index.jsonl            one line per corpus record, in corpus order
//! inputs/<sha256>.bin    raw input bytes
//! traces/<sha256>.gnt    GNT1 trace of that input
//! crashes/index.jsonl    archived crashes, in discovery order
//! crashes/inputs/, crashes/traces/
//! reports.jsonl          one EpochReport per line
//! checkpoints/epoch_<e>/ vae.lfck and gnn.lfck for the latest epoch only
//! ```
//!
//! Records are named by the sha256 of their input bytes.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, parse_config};
use crate::error::{Error, Result};
use crate::generator::{GeneratedString, Generator};
use crate::nn::{checkpoint, RmsProp};
use crate::orchestrator::{input_hash, CorpusRecord, EpochReport, FuzzerState, Rngs};
use crate::targets::{ExecutionRecord, Harness, Outcome};
use crate::trace::CoverageTrace;
use crate::vae::{LatentVector, Vae};

const STATE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct IndexLine {
    hash: String,
    epoch_found: u64,
    outcome: Outcome,
    latent: LatentVector,
    gnn_input: LatentVector,
}

#[derive(Serialize, Deserialize)]
struct CrashLine {
    hash: String,
    detail: String,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    version: u32,
    epoch: u64,
    learning_rate: f64,
    lr_halved: bool,
    staged: Vec<LatentVector>,
    seen: Vec<String>,
    rngs: Rngs,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temporary file so readers never see half a file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write(&tmp, bytes)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_string(path: &Path) -> Result<String> {
    String::from_utf8(read(path)?).map_err(|e| Error::corrupt(path, e.to_string()))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn jsonl<T: Serialize>(rows: impl Iterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, &r).expect("rows serialise");
        out.push(b'\n');
    }
    out
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = read_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::corrupt(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Writes the input/trace pair for each hash unless present, and deletes
/// files in those directories that belong to no listed hash.
fn sync_pairs<'a>(dir: &Path, pairs: impl Iterator<Item = (String, &'a [u8], &'a CoverageTrace)>) -> Result<()> {
    let inputs = dir.join("inputs");
    let traces = dir.join("traces");
    mkdir(&inputs)?;
    mkdir(&traces)?;
    let mut keep = HashSet::new();
    for (hash, bytes, trace) in pairs {
        let ip = inputs.join(format!("{hash}.bin"));
        if !ip.exists() {
            write(&ip, bytes)?;
        }
        let tp = traces.join(format!("{hash}.gnt"));
        if !tp.exists() {
            write(&tp, &trace.to_bytes())?;
        }
        keep.insert(format!("{hash}.bin"));
        keep.insert(format!("{hash}.gnt"));
    }
    for sub in [&inputs, &traces] {
        for entry in fs::read_dir(sub).map_err(|e| Error::io(sub, e))? {
            let entry = entry.map_err(|e| Error::io(sub, e))?;
            if !keep.contains(entry.file_name().to_string_lossy().as_ref()) {
                fs::remove_file(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
            }
        }
    }
    Ok(())
}

fn checkpoint_dir(dir: &Path, epoch: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("epoch_{epoch}"))
}

/// Writes the complete state of a campaign into `dir`.
pub fn save_state(state: &FuzzerState, dir: &Path) -> Result<()> {
    mkdir(dir)?;
    write_atomic(&dir.join("config.json"), state.config.to_json().as_bytes())?;

    sync_pairs(
        dir,
        state
            .corpus
            .iter()
            .map(|r| (r.hash(), r.input.as_bytes(), &r.trace)),
    )?;
    let index = jsonl(state.corpus.iter().map(|r| IndexLine {
        hash: r.hash(),
        epoch_found: r.epoch_found,
        outcome: r.outcome,
        latent: r.latent.clone(),
        gnn_input: r.gnn_input.clone(),
    }));
    write_atomic(&dir.join("index.jsonl"), &index)?;

    let crash_dir = dir.join("crashes");
    sync_pairs(
        &crash_dir,
        state
            .crashes
            .iter()
            .map(|c| (input_hash(&c.input), c.input.as_slice(), &c.trace)),
    )?;
    let crashes = jsonl(state.crashes.iter().map(|c| CrashLine {
        hash: input_hash(&c.input),
        detail: c.detail.clone(),
    }));
    write_atomic(&crash_dir.join("index.jsonl"), &crashes)?;

    let ck = checkpoint_dir(dir, state.epoch);
    mkdir(&ck)?;
    checkpoint::save(&state.vae.params, &ck.join("vae.lfck"))?;
    checkpoint::save(&state.gnn.params, &ck.join("gnn.lfck"))?;

    let file = StateFile {
        version: STATE_VERSION,
        epoch: state.epoch,
        learning_rate: state.learning_rate,
        lr_halved: state.lr_halved,
        staged: state.staged.clone(),
        seen: state.seen.iter().map(hex::encode).collect(),
        rngs: state.rngs.clone(),
    };
    write_atomic(
        &dir.join("state.json"),
        &serde_json::to_vec(&file).expect("state serialises"),
    )?;

    // older checkpoints go only once state.json points at the new one
    let root = dir.join("checkpoints");
    for entry in fs::read_dir(&root).map_err(|e| Error::io(&root, e))? {
        let entry = entry.map_err(|e| Error::io(&root, e))?;
        if entry.path() != ck {
            fs::remove_dir_all(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        }
    }
    Ok(())
}

pub fn append_report(dir: &Path, report: &EpochReport) -> Result<()> {
    let path = dir.join("reports.jsonl");
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let mut line = serde_json::to_vec(report).expect("report serialises");
    line.push(b'\n');
    f.write_all(&line).map_err(|e| Error::io(&path, e))
}

pub fn load_reports(dir: &Path) -> Result<Vec<EpochReport>> {
    let path = dir.join("reports.jsonl");
    if !path.exists() {
        return Ok(Vec::new());
    }
    parse_jsonl(&path)
}

/// Whether `dir` holds a saved campaign.
pub fn has_state(dir: &Path) -> bool {
    dir.join("state.json").is_file()
}

fn load_pair(dir: &Path, hash: &str, map_size: usize) -> Result<(Vec<u8>, CoverageTrace)> {
    let input = read(&dir.join("inputs").join(format!("{hash}.bin")))?;
    if input_hash(&input) != hash {
        return Err(Error::corrupt(dir.join("inputs").join(format!("{hash}.bin")), "content does not match its name"));
    }
    let tp = dir.join("traces").join(format!("{hash}.gnt"));
    let trace = CoverageTrace::from_bytes(&read(&tp)?).map_err(|e| Error::corrupt(&tp, e.to_string()))?;
    if trace.map_size() != map_size {
        return Err(Error::corrupt(&tp, format!("map size {} but the campaign uses {map_size}", trace.map_size())));
    }
    Ok((input, trace))
}

/// Restores a campaign written by [`save_state`]. The result continues
/// exactly as the saved campaign would have, and keeps persisting to `dir`.
pub fn load_state(dir: &Path) -> Result<FuzzerState> {
    let cfg_path = dir.join("config.json");
    let config = parse_config(Some(&read_string(&cfg_path)?), &[])?;
    let state_path = dir.join("state.json");
    let file: StateFile =
        serde_json::from_slice(&read(&state_path)?).map_err(|e| Error::corrupt(&state_path, e.to_string()))?;
    if file.version != STATE_VERSION {
        return Err(Error::corrupt(&state_path, format!("unsupported version {}", file.version)));
    }

    let ck = checkpoint_dir(dir, file.epoch);
    let vae = Vae::new(config.vae_spec(), derive_seed(config.seed, "vae"))?
        .with_params(checkpoint::load(&ck.join("vae.lfck"))?)?;
    let gnn = Generator::new(config.generator_spec(), derive_seed(config.seed, "gnn"))?
        .with_params(checkpoint::load(&ck.join("gnn.lfck"))?)?;

    let index_path = dir.join("index.jsonl");
    let corpus = parse_jsonl::<IndexLine>(&index_path)?
        .into_iter()
        .map(|line| {
            let (input, trace) = load_pair(dir, &line.hash, config.map_size)?;
            Ok(CorpusRecord {
                input: GeneratedString::new(input).map_err(|e| Error::corrupt(&index_path, e.to_string()))?,
                trace,
                latent: line.latent,
                gnn_input: line.gnn_input,
                epoch_found: line.epoch_found,
                outcome: line.outcome,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let crash_dir = dir.join("crashes");
    let crashes = parse_jsonl::<CrashLine>(&crash_dir.join("index.jsonl"))?
        .into_iter()
        .map(|line| {
            let (input, trace) = load_pair(&crash_dir, &line.hash, config.map_size)?;
            Ok(ExecutionRecord {
                input,
                trace,
                outcome: Outcome::Crash,
                detail: line.detail,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let seen = file
        .seen
        .iter()
        .map(|h| {
            hex::decode(h)
                .ok()
                .and_then(|b| <[u8; 32]>::try_from(b).ok())
                .ok_or_else(|| Error::corrupt(&state_path, format!("bad trace digest {h}")))
        })
        .collect::<Result<BTreeSet<_>>>()?;

    Ok(FuzzerState {
        harness: Harness::new(config.map_size, config.str_len_max)?,
        config,
        epoch: file.epoch,
        corpus,
        vae,
        gnn,
        crashes,
        staged: file.staged,
        learning_rate: file.learning_rate,
        lr_halved: file.lr_halved,
        seen,
        rngs: file.rngs,
        opt: RmsProp::default(),
        out_dir: Some(dir.to_path_buf()),
    })
}
