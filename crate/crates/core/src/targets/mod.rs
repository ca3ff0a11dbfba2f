//! Bundled instrumented parsers and the in-process execution harness.
//!
//! Every target is a small hand-written parser whose decision points call
//! [`Tracer::hit`] with a fixed location id. Each target carries exactly one
//! seeded fault behind a syntactic predicate; triggering it yields
//! [`Outcome::Crash`] instead of aborting the host process.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{CoverageTrace, Tracer};

mod csub;
mod json;
mod xmlite;

/// Default cap on input length in bytes.
pub const DEFAULT_MAX_INPUT_LEN: usize = 512;

/// Nesting limit shared by the recursive-descent targets.
pub(crate) const MAX_DEPTH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetProgram {
    Json,
    Xmlite,
    Csub,
}

impl TargetProgram {
    pub const ALL: [TargetProgram; 3] = [TargetProgram::Json, TargetProgram::Xmlite, TargetProgram::Csub];

    pub fn id(self) -> &'static str {
        match self {
            TargetProgram::Json => "json",
            TargetProgram::Xmlite => "xmlite",
            TargetProgram::Csub => "csub",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.id() == id)
            .ok_or_else(|| Error::UnknownTarget(id.to_string()))
    }

    /// Human-readable description of the seeded fault trigger.
    pub fn fault_predicate_doc(self) -> &'static str {
        match self {
            TargetProgram::Json => {
                "an object member whose key is the empty string and whose value is the literal null, e.g. {\"\":null}"
            }
            TargetProgram::Xmlite => {
                "a start tag with an empty namespace prefix (name beginning with ':') nested inside another element, e.g. <a><:b/></a>"
            }
            TargetProgram::Csub => {
                "a statement that opens with an empty pair of parentheses, i.e. the tokens `(` `)` at statement start, e.g. `();`"
            }
        }
    }

    /// An input satisfying the fault predicate.
    pub fn fault_fixture(self) -> &'static [u8] {
        match self {
            TargetProgram::Json => b"{\"\":null}",
            TargetProgram::Xmlite => b"<a><:b/></a>",
            TargetProgram::Csub => b"int x = 1;\n();\n",
        }
    }

    /// Two inputs the target accepts but traces differently.
    pub fn sensitivity_fixtures(self) -> [&'static [u8]; 2] {
        match self {
            TargetProgram::Json => [b"{}", b"[1, 2, {\"a\": true}]"],
            TargetProgram::Xmlite => [b"<a/>", b"<a x=\"1\"><b>text &amp; more</b></a>"],
            TargetProgram::Csub => [b"x = 1;", b"int f(int a) { while (a) { a = a - 1; } return a; }"],
        }
    }

    fn run(self, input: &[u8], tracer: &mut Tracer) -> Verdict {
        match self {
            TargetProgram::Json => json::run(input, tracer),
            TargetProgram::Xmlite => xmlite::run(input, tracer),
            TargetProgram::Csub => csub::run(input, tracer),
        }
    }
}

impl fmt::Display for TargetProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for TargetProgram {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_id(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Accepted,
    Rejected,
    Crash,
}

/// What a target reports after a parse attempt.
pub(crate) enum Verdict {
    Accept,
    Reject(String),
    Fault(&'static str),
}

/// Early exit from a parser: a syntax error or the seeded fault.
#[derive(Debug)]
pub(crate) enum Stop {
    Syntax(&'static str),
    Fault(&'static str),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecutionRecord {
    pub input: Vec<u8>,
    pub trace: CoverageTrace,
    pub outcome: Outcome,
    pub detail: String,
}

/// Runs bundled targets with a fixed map size and input cap.
#[derive(Clone, Copy, Debug)]
pub struct Harness {
    map_size: usize,
    max_input_len: usize,
}

impl Harness {
    pub fn new(map_size: usize, max_input_len: usize) -> Result<Self> {
        // validates the map size
        Tracer::new(map_size)?;
        Ok(Harness {
            map_size,
            max_input_len,
        })
    }

    pub fn map_size(&self) -> usize {
        self.map_size
    }

    pub fn max_input_len(&self) -> usize {
        self.max_input_len
    }

    pub fn execute(&self, target: TargetProgram, input: &[u8]) -> Result<ExecutionRecord> {
        if input.len() > self.max_input_len {
            return Err(Error::InputTooLong {
                len: input.len(),
                max: self.max_input_len,
            });
        }
        let mut tracer = Tracer::new(self.map_size)?;
        let verdict = target.run(input, &mut tracer);
        let (outcome, detail) = match verdict {
            Verdict::Accept => (Outcome::Accepted, String::from("ok")),
            Verdict::Reject(why) => (Outcome::Rejected, why),
            Verdict::Fault(why) => (Outcome::Crash, format!("seeded fault: {why}")),
        };
        Ok(ExecutionRecord {
            input: input.to_vec(),
            trace: tracer.finish(),
            outcome,
            detail,
        })
    }
}

/// Executes `input` on the target named `target_id` with the default input cap.
pub fn execute_target(target_id: &str, input: &[u8], map_size: usize) -> Result<ExecutionRecord> {
    let target = TargetProgram::from_id(target_id)?;
    Harness::new(map_size, DEFAULT_MAX_INPUT_LEN)?.execute(target, input)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(target: TargetProgram, input: &[u8]) -> ExecutionRecord {
        Harness::new(1024, DEFAULT_MAX_INPUT_LEN)
            .unwrap()
            .execute(target, input)
            .unwrap()
    }

    #[test]
    fn unknown_target_is_a_lookup_error() {
        assert!(matches!(
            execute_target("sparse", b"", 1024),
            Err(Error::UnknownTarget(_))
        ));
    }

    #[test]
    fn oversized_input_is_rejected_not_truncated() {
        let h = Harness::new(1024, 8).unwrap();
        let err = h.execute(TargetProgram::Json, b"[1,2,3,4,5]").unwrap_err();
        assert!(matches!(err, Error::InputTooLong { len: 11, max: 8 }));
    }

    #[test]
    fn fault_fixtures_crash_and_nothing_else_does() {
        for t in TargetProgram::ALL {
            assert_eq!(run(t, t.fault_fixture()).outcome, Outcome::Crash, "{t}");
            for fixture in t.sensitivity_fixtures() {
                assert_eq!(run(t, fixture).outcome, Outcome::Accepted, "{t}: {fixture:?}");
            }
        }
    }

    #[test]
    fn fixtures_are_distinguishable() {
        for t in TargetProgram::ALL {
            let [a, b] = t.sensitivity_fixtures();
            assert_ne!(run(t, a).trace, run(t, b).trace, "{t}");
        }
    }

    #[test]
    fn successful_runs_never_produce_empty_traces() {
        for t in TargetProgram::ALL {
            for input in [&b""[..], b"\x00", b"zzz", t.fault_fixture()] {
                assert!(!run(t, input).trace.is_all_zero());
            }
        }
    }

    #[test]
    fn executions_are_isolated() {
        let h = Harness::new(1024, 512).unwrap();
        for t in TargetProgram::ALL {
            let [a, b] = t.sensitivity_fixtures();
            let alone = h.execute(t, b).unwrap();
            h.execute(t, a).unwrap();
            assert_eq!(h.execute(t, b).unwrap(), alone);
        }
    }

    #[test]
    fn json_examples() {
        let r = run(TargetProgram::Json, b"{}");
        assert_eq!(r.outcome, Outcome::Accepted);
        assert!(r.trace.nonzero_slots() >= 1);
        assert_eq!(run(TargetProgram::Json, b"\x00\x01\x02").outcome, Outcome::Rejected);
        assert_eq!(run(TargetProgram::Json, b"{}"), r);
    }
}
