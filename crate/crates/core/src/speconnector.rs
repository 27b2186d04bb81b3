//! Receiver side: find the victim's magic pages, alias them onto the
//! receiver's own frames, then decode one byte per Flush+Reload round.
//!
//! The receiver only reads victim memory. Aliasing lives in the cache
//! addressing table of the shared [`MicroArchState`], so a victim access to
//! magic page `i` and a receiver access to frame `i` hit the same line.
//! Victim and receiver interleave explicitly: each round flushes the frames,
//! steps the victim once and reloads.

use serde::Serialize;

use crate::cache::Residency;
use crate::config::{ConfigError, LabConfig};
use crate::gadgets::{build_covert_sender, build_gadget, Gadget, GadgetError, GadgetKind, GadgetSpec, TABLE_PAGES};
use crate::isa::{MemoryImage, BASE_REG, PAGE_SIZE};
use crate::pipeline::{run, ArchState, ExecError, ExecutionTrace, MicroArchState, PipelineConfig};

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("magic region incomplete: found {found} of {TABLE_PAGES} pages")]
    MagicIncomplete { found: usize },
    #[error("shared mapping needs exactly {TABLE_PAGES} pages, got {0}")]
    WrongPageCount(usize),
    #[error("no shared mapping established")]
    NotConnected,
    #[error("victim crashed: {0}")]
    Victim(#[from] ExecError),
    #[error("victim is unusable after an earlier crash")]
    VictimGone,
    #[error(transparent)]
    Gadget(#[from] GadgetError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MagicScan {
    pub magic: u64,
    /// Ascending page ids whose every 8-byte word equals `magic`.
    pub pages: Vec<u64>,
}

/// Read-only scan of victim memory for fully magic pages.
pub fn scan_for_magic(memory: &MemoryImage, magic: u64) -> Result<MagicScan, ProtocolError> {
    let word = magic.to_le_bytes();
    let pages: Vec<u64> = (0..memory.pages())
        .filter(|&p| memory.page(p).is_some_and(|bytes| bytes.chunks_exact(8).all(|w| w == word)))
        .collect();
    if pages.len() < TABLE_PAGES as usize {
        return Err(ProtocolError::MagicIncomplete { found: pages.len() });
    }
    Ok(MagicScan { magic, pages })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SharedMapping {
    /// `(victim page, receiver frame index)`, frame `i` for the `i`-th magic page.
    pub pairs: Vec<(u64, u64)>,
    /// Page id of receiver frame 0.
    pub frame_base_page: u64,
}

impl SharedMapping {
    pub fn frame_addr(&self, frame: u64) -> u64 {
        (self.frame_base_page + frame) * PAGE_SIZE
    }

    fn install(&self, uarch: &mut MicroArchState) {
        for &(page, frame) in &self.pairs {
            uarch.aliases.insert(page, self.frame_base_page + frame);
        }
    }
}

/// Pairs the scanned pages with the receiver's frames and installs the
/// aliasing in `uarch`. Installing the same mapping again changes nothing.
pub fn establish_shared(scan: &MagicScan, frame_base_page: u64, uarch: &mut MicroArchState) -> Result<SharedMapping, ProtocolError> {
    if scan.pages.len() != TABLE_PAGES as usize {
        return Err(ProtocolError::WrongPageCount(scan.pages.len()));
    }
    let mapping = SharedMapping {
        pairs: scan.pages.iter().enumerate().map(|(i, &p)| (p, i as u64)).collect(),
        frame_base_page,
    };
    mapping.install(uarch);
    Ok(mapping)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum RoundOutcome {
    Byte(u8),
    Nothing,
    Ambiguous(Vec<u8>),
}

/// One Flush+Reload round: flush every frame's probe line (offset 0), run
/// `step`, then reload each frame and classify its latency. Each probe line
/// is flushed again right after it is timed so probes do not evict each
/// other.
pub fn flush_reload_round<R>(
    mapping: &SharedMapping,
    uarch: &mut MicroArchState,
    threshold: u64,
    step: impl FnOnce(&mut MicroArchState) -> R,
) -> (RoundOutcome, R) {
    for frame in 0..TABLE_PAGES {
        uarch.cache.flush(mapping.frame_addr(frame));
    }
    let result = step(uarch);
    let mut hits = Vec::new();
    for frame in 0..TABLE_PAGES {
        let addr = mapping.frame_addr(frame);
        let latency = uarch.cache.access(addr).latency;
        uarch.cache.flush(addr);
        // threshold is validated with the config
        if uarch.cache.config().classify(latency, threshold) == Ok(Residency::Cached) {
            hits.push(frame as u8);
        }
    }
    let outcome = match hits.as_slice() {
        [] => RoundOutcome::Nothing,
        [b] => RoundOutcome::Byte(*b),
        _ => RoundOutcome::Ambiguous(hits),
    };
    (outcome, result)
}

/// A victim process: one gadget plus its persistent memory.
#[derive(Debug)]
pub struct Victim {
    gadget: Gadget,
    arch: Option<ArchState>,
    cfg: PipelineConfig,
}

impl Victim {
    pub fn new(gadget: Gadget, cfg: PipelineConfig) -> Victim {
        let arch = ArchState::new(gadget.initial_image());
        Victim { gadget, arch: Some(arch), cfg }
    }

    pub fn gadget(&self) -> &Gadget {
        &self.gadget
    }

    pub fn memory(&self) -> Option<&MemoryImage> {
        self.arch.as_ref().map(|a| &a.memory)
    }

    /// One invocation: registers cleared, `r15` = region base, inputs in `r1..`.
    pub fn invoke(&mut self, uarch: &mut MicroArchState, inputs: &[u64]) -> Result<ExecutionTrace, ProtocolError> {
        let mut arch = self.arch.take().ok_or(ProtocolError::VictimGone)?;
        arch.regs = [0; 16];
        arch.regs[BASE_REG.index()] = self.gadget.layout.region_base;
        let out = run(&self.gadget.program, arch, uarch, &self.cfg, inputs)?;
        self.arch = Some(out.arch);
        Ok(out.trace)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Schedule {
    pub training: usize,
    pub max_rounds: usize,
}

impl Schedule {
    pub fn from_config(cfg: &LabConfig) -> Schedule {
        Schedule { training: cfg.attack.training, max_rounds: cfg.attack.max_rounds }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ByteStatus {
    Recovered,
    Ambiguous,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ByteReport {
    pub index: usize,
    pub value: Option<u8>,
    pub status: ByteStatus,
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LeakReport {
    pub requested: usize,
    pub bytes: Vec<ByteReport>,
    /// Hex of the recovered bytes, in order, skipping unrecovered ones.
    pub recovered_hex: String,
    pub recovered_text: String,
    pub rounds_total: usize,
    /// Transient instructions executed during exploit invocations.
    pub transient_instructions: usize,
    pub schedule: Schedule,
}

impl LeakReport {
    fn new(requested: usize, bytes: Vec<ByteReport>, transient_instructions: usize, schedule: Schedule) -> LeakReport {
        let recovered: Vec<u8> = bytes.iter().filter_map(|b| b.value).collect();
        LeakReport {
            requested,
            recovered_hex: recovered.iter().map(|b| format!("{b:02x}")).collect(),
            recovered_text: String::from_utf8_lossy(&recovered).into_owned(),
            rounds_total: bytes.iter().map(|b| b.rounds).sum(),
            bytes,
            transient_instructions,
            schedule,
        }
    }

    pub fn recovered(&self) -> Vec<u8> {
        self.bytes.iter().filter_map(|b| b.value).collect()
    }

    /// Bytes whose recovered value matches `secret` at the same index.
    pub fn correct(&self, secret: &[u8]) -> usize {
        self.bytes.iter().filter(|b| b.value.is_some() && secret.get(b.index).copied() == b.value).count()
    }

    pub fn all_none(&self) -> bool {
        self.bytes.iter().all(|b| b.status == ByteStatus::None)
    }
}

/// Receiver plus victim sharing one simulated core.
#[derive(Debug)]
pub struct Session {
    pub uarch: MicroArchState,
    pub victim: Victim,
    mapping: Option<SharedMapping>,
    threshold: u64,
}

impl Session {
    pub fn new(gadget: Gadget, cfg: &LabConfig) -> Result<Session, ProtocolError> {
        Ok(Session {
            uarch: cfg.machine()?,
            victim: Victim::new(gadget, cfg.pipeline_config()),
            mapping: None,
            threshold: cfg.threshold(),
        })
    }

    pub fn mapping(&self) -> Option<&SharedMapping> {
        self.mapping.as_ref()
    }

    /// Scans the victim for its magic pages and aliases them to the
    /// receiver's frames.
    pub fn connect(&mut self) -> Result<&SharedMapping, ProtocolError> {
        let memory = self.victim.memory().ok_or(ProtocolError::VictimGone)?;
        let layout = &self.victim.gadget().layout;
        let scan = scan_for_magic(memory, layout.magic)?;
        let frame_base = layout.lookup_base / PAGE_SIZE;
        let mapping = establish_shared(&scan, frame_base, &mut self.uarch)?;
        Ok(self.mapping.insert(mapping))
    }

    /// Flush+Reload around a single victim invocation with `inputs`; `None`
    /// skips the victim entirely.
    pub fn round(&mut self, inputs: Option<&[u64]>) -> Result<(RoundOutcome, ExecutionTrace), ProtocolError> {
        let mapping = self.mapping.as_ref().ok_or(ProtocolError::NotConnected)?;
        let victim = &mut self.victim;
        let (outcome, trace) = flush_reload_round(mapping, &mut self.uarch, self.threshold, |uarch| match inputs {
            Some(inputs) => victim.invoke(uarch, inputs),
            None => Ok(ExecutionTrace::default()),
        });
        Ok((outcome, trace?))
    }

    /// Per byte: `training` in-bounds invocations, flush of the
    /// resolution-gating line, then one Flush+Reload round around the
    /// out-of-bounds invocation; retried up to `max_rounds` times until
    /// exactly one frame lights up.
    pub fn recover_secret(&mut self, n: usize, schedule: Schedule) -> Result<LeakReport, ProtocolError> {
        if self.mapping.is_none() {
            return Err(ProtocolError::NotConnected);
        }
        let gadget = self.victim.gadget().clone();
        let mut bytes = Vec::with_capacity(n);
        let mut transient = 0;
        for i in 0..n {
            let mut report = ByteReport { index: i, value: None, status: ByteStatus::None, rounds: 0 };
            for round in 1..=schedule.max_rounds.max(1) {
                report.rounds = round;
                for j in 0..schedule.training {
                    self.victim.invoke(&mut self.uarch, &gadget.training_inputs(j))?;
                }
                if let Some(addr) = gadget.condition_addr {
                    self.uarch.flush(addr);
                }
                let (outcome, trace) = self.round(Some(&gadget.exploit_inputs(i)))?;
                transient += trace.transient_total();
                match outcome {
                    RoundOutcome::Byte(b) => {
                        report.value = Some(b);
                        report.status = ByteStatus::Recovered;
                        break;
                    }
                    RoundOutcome::Ambiguous(_) => report.status = ByteStatus::Ambiguous,
                    RoundOutcome::Nothing => report.status = ByteStatus::None,
                }
            }
            bytes.push(report);
        }
        Ok(LeakReport::new(n, bytes, transient, schedule))
    }
}

/// Builds the gadget for `spec`, connects a receiver and recovers `n` bytes.
pub fn recover_secret(spec: &GadgetSpec, n: usize, schedule: Schedule, cfg: &LabConfig) -> Result<LeakReport, ProtocolError> {
    let mut session = Session::new(build_gadget(spec)?, cfg)?;
    session.connect()?;
    session.recover_secret(n, schedule)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CovertResult {
    pub pattern: Vec<u8>,
    pub rounds: Vec<RoundOutcome>,
    pub reconstructed: Vec<u8>,
    pub exact: bool,
}

/// Phase one of the methodology: the sender architecturally touches one
/// page per step and the receiver must rebuild the pattern exactly. With
/// `sender_enabled = false` the rounds run without the victim.
pub fn covert_channel_run(pattern: &[u8], cfg: &LabConfig, sender_enabled: bool) -> Result<CovertResult, ProtocolError> {
    if pattern.is_empty() {
        return Ok(CovertResult { pattern: Vec::new(), rounds: Vec::new(), reconstructed: Vec::new(), exact: true });
    }
    let gadget = build_covert_sender(pattern, &cfg.layout(&[])?)?;
    debug_assert_eq!(gadget.kind, GadgetKind::CovertSender);
    let mut session = Session::new(gadget, cfg)?;
    session.connect()?;
    let mut rounds = Vec::with_capacity(pattern.len());
    for step in 0..pattern.len() as u64 {
        let inputs = [step];
        let (outcome, _) = session.round(sender_enabled.then_some(&inputs[..]))?;
        rounds.push(outcome);
    }
    let reconstructed: Vec<u8> = rounds
        .iter()
        .filter_map(|r| match r {
            RoundOutcome::Byte(b) => Some(*b),
            _ => None,
        })
        .collect();
    let exact = reconstructed == pattern;
    Ok(CovertResult { pattern: pattern.to_vec(), rounds, reconstructed, exact })
}

pub fn covert_channel_test(pattern: &[u8], cfg: &LabConfig) -> Result<CovertResult, ProtocolError> {
    covert_channel_run(pattern, cfg, true)
}
