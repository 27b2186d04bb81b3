//! Program rewrites and configuration switches that defend against the
//! four variants, plus the leakage matrix.
//!
//! | kind         | effect                                                             |
//! |--------------|--------------------------------------------------------------------|
//! | `fence`      | FENCE at both successors of each CMPBLT, after each CALL and at every label loaded with MOVL |
//! | `index_mask` | branchless clamp of the index in a bounds-checked double load       |
//! | `retpoline`  | every JMPI becomes a CALL/RET pair whose predicted return is a FENCE |
//! | `rsb_stuff`  | every RET is preceded by a CALL that leaves a FENCE on the RSB       |
//! | `ssbd`       | disables store bypass in the pipeline configuration                |
//!
//! Rewrites use `r13` as scratch and may clobber `r14`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::LabConfig;
use crate::gadgets::{build_gadget, GadgetSpec};
use crate::isa::{AluOp, Instruction, Label, LabelDef, Operand, Program, Reg, Scale, LINK_REG, SCRATCH_REG};
use crate::pipeline::{PipelineConfig, Variant};
use crate::speconnector::{ProtocolError, Schedule, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mitigation {
    Fence,
    IndexMask,
    Retpoline,
    RsbStuff,
    Ssbd,
}

impl Mitigation {
    /// Order in which rewrites are applied when several are selected.
    pub const ALL: [Mitigation; 5] = [
        Mitigation::IndexMask,
        Mitigation::Retpoline,
        Mitigation::RsbStuff,
        Mitigation::Fence,
        Mitigation::Ssbd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mitigation::Fence => "fence",
            Mitigation::IndexMask => "index_mask",
            Mitigation::Retpoline => "retpoline",
            Mitigation::RsbStuff => "rsb_stuff",
            Mitigation::Ssbd => "ssbd",
        }
    }

    /// Variants this mitigation is expected to stop on its own.
    pub fn blocks(self) -> &'static [Variant] {
        match self {
            Mitigation::Fence => &[Variant::Pht, Variant::Btb, Variant::Rsb],
            Mitigation::IndexMask => &[Variant::Pht],
            Mitigation::Retpoline => &[Variant::Btb],
            Mitigation::RsbStuff => &[Variant::Rsb],
            Mitigation::Ssbd => &[Variant::Stl],
        }
    }
}

impl fmt::Display for Mitigation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MitigationError {
    #[error("unknown mitigation `{0}`")]
    Unknown(String),
    #[error("{mitigation}: no applicable pattern in program")]
    PatternNotFound { mitigation: Mitigation },
    #[error("rewritten program is invalid: {0}")]
    Program(#[from] crate::isa::ProgramError),
}

impl FromStr for Mitigation {
    type Err = MitigationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mitigation::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| MitigationError::Unknown(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MitigationSet(u8);

impl MitigationSet {
    pub const NONE: MitigationSet = MitigationSet(0);
    pub const ALL: MitigationSet = MitigationSet(0b11111);

    pub fn single(m: Mitigation) -> MitigationSet {
        MitigationSet(1 << m as u8)
    }

    pub fn from_bits(bits: u8) -> MitigationSet {
        MitigationSet(bits & Self::ALL.0)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn with(self, m: Mitigation) -> MitigationSet {
        MitigationSet(self.0 | 1 << m as u8)
    }

    pub fn contains(self, m: Mitigation) -> bool {
        self.0 & (1 << m as u8) != 0
    }

    pub fn is_subset(self, other: MitigationSet) -> bool {
        self.0 & !other.0 == 0
    }

    /// Members in application order.
    pub fn iter(self) -> impl Iterator<Item = Mitigation> {
        Mitigation::ALL.into_iter().filter(move |&m| self.contains(m))
    }

    /// All 32 subsets.
    pub fn all_subsets() -> impl Iterator<Item = MitigationSet> {
        (0..=Self::ALL.0).map(MitigationSet)
    }

    pub fn expected_blocks(self, variant: Variant) -> bool {
        self.iter().any(|m| m.blocks().contains(&variant))
    }

    /// Rows of the standard matrix: baseline, each single kind, everything.
    pub fn matrix_rows() -> Vec<MitigationSet> {
        let mut rows = vec![MitigationSet::NONE];
        rows.extend([Mitigation::Fence, Mitigation::IndexMask, Mitigation::Retpoline, Mitigation::RsbStuff, Mitigation::Ssbd].map(MitigationSet::single));
        rows.push(MitigationSet::ALL);
        rows
    }
}

impl fmt::Display for MitigationSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            MitigationSet::NONE => f.write_str("none"),
            MitigationSet::ALL => f.write_str("all"),
            set => {
                let names: Vec<&str> = set.iter().map(Mitigation::name).collect();
                f.write_str(&names.join("+"))
            }
        }
    }
}

impl FromStr for MitigationSet {
    type Err = MitigationError;

    /// `none`, `all`, or names joined by `+` or `,`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "" => Ok(MitigationSet::NONE),
            "all" => Ok(MitigationSet::ALL),
            list => list.split(['+', ',']).try_fold(MitigationSet::NONE, |set, name| Ok(set.with(name.parse()?))),
        }
    }
}

impl Serialize for MitigationSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

enum Item {
    Ins(Instruction),
    Def(Label),
}

/// Collects insertions and replacements keyed by original instruction index,
/// then rebuilds the program with labels moved accordingly. Original labels
/// at an index end up on the first instruction emitted for it.
struct Splice<'a> {
    program: &'a Program,
    fresh: Vec<String>,
    before: BTreeMap<usize, Vec<Item>>,
    replace: BTreeMap<usize, Vec<Item>>,
}

impl<'a> Splice<'a> {
    fn new(program: &'a Program) -> Splice<'a> {
        Splice { program, fresh: Vec::new(), before: BTreeMap::new(), replace: BTreeMap::new() }
    }

    fn taken(&self, name: &str) -> bool {
        self.program.find_label(name).is_some() || self.fresh.iter().any(|n| n == name)
    }

    /// One label `{prefix}_{tag}_{n}` per tag, sharing an unused `n`.
    fn labels(&mut self, prefix: &str, tags: &[&str]) -> Vec<Label> {
        let n = (0..).find(|n| tags.iter().all(|t| !self.taken(&format!("{prefix}_{t}_{n}")))).unwrap();
        tags.iter()
            .map(|t| {
                self.fresh.push(format!("{prefix}_{t}_{n}"));
                Label((self.program.labels().len() + self.fresh.len() - 1) as u32)
            })
            .collect()
    }

    fn insert_before(&mut self, at: usize, items: impl IntoIterator<Item = Item>) {
        self.before.entry(at).or_default().extend(items);
    }

    fn replace(&mut self, at: usize, items: Vec<Item>) {
        self.replace.insert(at, items);
    }

    fn finish(mut self) -> Result<Program, MitigationError> {
        let original = self.program.labels();
        let mut labels: Vec<LabelDef> = original.to_vec();
        labels.extend(self.fresh.iter().map(|name| LabelDef { name: name.clone(), index: 0 }));
        let mut out = Vec::new();
        for (k, ins) in self.program.instructions().iter().enumerate() {
            for (id, def) in original.iter().enumerate() {
                if def.index == k {
                    labels[id].index = out.len();
                }
            }
            let body = self.replace.remove(&k).unwrap_or_else(|| vec![Item::Ins(*ins)]);
            for item in self.before.remove(&k).into_iter().flatten().chain(body) {
                match item {
                    Item::Ins(i) => out.push(i),
                    Item::Def(l) => labels[l.id()].index = out.len(),
                }
            }
        }
        Ok(Program::from_parts(out, labels)?)
    }
}

fn movi(dst: Reg, value: u64) -> Item {
    Item::Ins(Instruction::MovImm { dst, value })
}

fn add(dst: Reg, src: Reg) -> Item {
    Item::Ins(Instruction::Alu { op: AluOp::Add, dst, src: Operand::Reg(src) })
}

fn copy(dst: Reg, src: Reg) -> Vec<Item> {
    if dst == src {
        Vec::new()
    } else {
        vec![movi(dst, 0), add(dst, src)]
    }
}

fn fence_pass(program: &Program) -> Result<Program, MitigationError> {
    let ins = program.instructions();
    let mut sites = BTreeSet::new();
    for (k, i) in ins.iter().enumerate() {
        match *i {
            Instruction::CmpBranchLess { target, .. } => {
                sites.insert(k + 1);
                sites.insert(program.target(target));
            }
            Instruction::Call { .. } => {
                sites.insert(k + 1);
            }
            Instruction::MovLabel { target, .. } => {
                sites.insert(program.target(target));
            }
            _ => {}
        }
    }
    sites.retain(|&k| k < ins.len() && ins[k] != Instruction::Fence);
    let mut splice = Splice::new(program);
    for k in sites {
        splice.insert_before(k, [Item::Ins(Instruction::Fence)]);
    }
    splice.finish()
}

/// `CMPBLT rx, rlen, L` where `L` is reached only through the branch and
/// starts with `LOADB v, _, rx, 1` followed by `LOADB _, _, v, 4096`.
fn index_mask_sites(program: &Program) -> Vec<(usize, Reg, Reg)> {
    let ins = program.instructions();
    let mut refs: BTreeMap<usize, usize> = BTreeMap::new();
    for i in ins {
        if let Some(l) = i.label() {
            *refs.entry(program.target(l)).or_default() += 1;
        }
    }
    let mut sites = Vec::new();
    for i in ins {
        let Instruction::CmpBranchLess { a: rx, b: rlen, target } = *i else { continue };
        let t = program.target(target);
        if t == 0 || refs[&t] != 1 || rx == SCRATCH_REG || rlen == SCRATCH_REG {
            continue;
        }
        if !matches!(ins[t - 1], Instruction::Halt | Instruction::Ret | Instruction::JumpIndirect { .. }) {
            continue;
        }
        let pattern = match (ins.get(t), ins.get(t + 1)) {
            (
                Some(Instruction::LoadByte { dst: v, index, scale: Scale::Byte, .. }),
                Some(Instruction::LoadByte { index: v2, scale: Scale::Page, .. }),
            ) => *index == rx && v2 == v,
            _ => false,
        };
        if pattern && !sites.iter().any(|&(s, _, _)| s == t) {
            sites.push((t, rx, rlen));
        }
    }
    sites
}

fn index_mask_pass(program: &Program) -> Result<Program, MitigationError> {
    let sites = index_mask_sites(program);
    if sites.is_empty() {
        return Err(MitigationError::PatternNotFound { mitigation: Mitigation::IndexMask });
    }
    let mut splice = Splice::new(program);
    for &(t, rx, rlen) in &sites {
        splice.insert_before(
            t,
            [
                Item::Ins(Instruction::SelectMask { dst: SCRATCH_REG, a: rx, b: rlen }),
                Item::Ins(Instruction::Alu { op: AluOp::And, dst: rx, src: Operand::Reg(SCRATCH_REG) }),
            ],
        );
    }
    splice.finish()
}

fn retpoline_pass(program: &Program) -> Result<Program, MitigationError> {
    let mut splice = Splice::new(program);
    for (k, i) in program.instructions().iter().enumerate() {
        let Instruction::JumpIndirect { target } = *i else { continue };
        let l = splice.labels("__rp", &["capture", "setup"]);
        let mut items = vec![
            Item::Ins(Instruction::Call { target: l[1] }),
            Item::Def(l[0]),
            Item::Ins(Instruction::Fence),
            Item::Def(l[1]),
        ];
        items.extend(copy(LINK_REG, target));
        items.push(Item::Ins(Instruction::Ret));
        splice.replace(k, items);
    }
    splice.finish()
}

fn rsb_stuff_pass(program: &Program) -> Result<Program, MitigationError> {
    let mut splice = Splice::new(program);
    for (k, i) in program.instructions().iter().enumerate() {
        if *i != Instruction::Ret {
            continue;
        }
        let l = splice.labels("__rs", &["pad", "fill"]);
        let mut items = copy(SCRATCH_REG, LINK_REG);
        items.extend([
            Item::Ins(Instruction::Call { target: l[1] }),
            Item::Def(l[0]),
            Item::Ins(Instruction::Fence),
            Item::Def(l[1]),
        ]);
        items.extend(copy(LINK_REG, SCRATCH_REG));
        splice.insert_before(k, items);
    }
    splice.finish()
}

fn apply_one(program: &Program, m: Mitigation) -> Result<Program, MitigationError> {
    match m {
        Mitigation::Fence => fence_pass(program),
        Mitigation::IndexMask => index_mask_pass(program),
        Mitigation::Retpoline => retpoline_pass(program),
        Mitigation::RsbStuff => rsb_stuff_pass(program),
        Mitigation::Ssbd => Ok(program.clone()),
    }
}

/// Applies every rewrite in `set`. Rewrites with nothing to match return the
/// program unchanged, except `index_mask`, which reports
/// [`MitigationError::PatternNotFound`].
pub fn apply(program: &Program, set: MitigationSet) -> Result<Program, MitigationError> {
    set.iter().try_fold(program.clone(), |p, m| apply_one(&p, m))
}

/// Like [`apply`], but skips `index_mask` where it finds no bounds check.
pub fn apply_lenient(program: &Program, set: MitigationSet) -> Result<Program, MitigationError> {
    set.iter().try_fold(program.clone(), |p, m| match apply_one(&p, m) {
        Err(MitigationError::PatternNotFound { .. }) => Ok(p),
        other => other,
    })
}

/// Pipeline configuration under `set`.
pub fn adjust(cfg: &PipelineConfig, set: MitigationSet) -> PipelineConfig {
    let mut cfg = cfg.clone();
    if set.contains(Mitigation::Ssbd) {
        cfg.store_bypass.enabled = false;
    }
    cfg
}

/// Lab configuration under `set`.
pub fn adjust_lab(cfg: &LabConfig, set: MitigationSet) -> LabConfig {
    let mut lab = cfg.clone();
    lab.pipeline.store_bypass = adjust(&cfg.pipeline_config(), set).store_bypass.enabled;
    lab
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Evaluation {
    pub variant: Variant,
    pub mitigation: MitigationSet,
    pub leaked: bool,
    pub bytes_recovered: usize,
    pub transient_count: usize,
}

/// Runs the full attack on `variant` with `set` in place. Leaked means at
/// least one secret byte came back correct.
pub fn evaluate(variant: Variant, set: MitigationSet, cfg: &LabConfig) -> Result<Evaluation, ProtocolError> {
    let secret = cfg.attack.secret.as_bytes();
    let spec = GadgetSpec { training: cfg.attack.training, ..GadgetSpec::new(variant, cfg.layout(secret)?) };
    let gadget = build_gadget(&spec)?;
    let program = apply_lenient(&gadget.program, set).expect("rewrites of generated gadgets are valid");
    let mut session = Session::new(gadget.with_program(program), &adjust_lab(cfg, set))?;
    session.connect()?;
    let report = session.recover_secret(secret.len(), Schedule::from_config(cfg))?;
    let bytes_recovered = report.correct(secret);
    Ok(Evaluation {
        variant,
        mitigation: set,
        leaked: bytes_recovered > 0,
        bytes_recovered,
        transient_count: report.transient_instructions,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MatrixReport {
    pub rows: Vec<Evaluation>,
}

impl MatrixReport {
    pub fn get(&self, variant: Variant, set: MitigationSet) -> Option<&Evaluation> {
        self.rows.iter().find(|e| e.variant == variant && e.mitigation == set)
    }

    /// Rows whose outcome differs from [`MitigationSet::expected_blocks`].
    pub fn mismatches(&self) -> Vec<&Evaluation> {
        self.rows.iter().filter(|e| e.leaked == e.mitigation.expected_blocks(e.variant)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,mitigation,leaked,bytes_recovered,transient_count\n");
        for e in &self.rows {
            s += &format!("{},{},{},{},{}\n", e.variant, e.mitigation, e.leaked, e.bytes_recovered, e.transient_count);
        }
        s
    }
}

/// Evaluates every variant against every set in `sets`, in parallel.
pub fn matrix(cfg: &LabConfig, sets: &[MitigationSet]) -> Result<MatrixReport, ProtocolError> {
    let cells: Vec<(Variant, MitigationSet)> =
        Variant::ALL.iter().flat_map(|&v| sets.iter().map(move |&s| (v, s))).collect();
    let rows = cells.into_par_iter().map(|(v, s)| evaluate(v, s, cfg)).collect::<Result<Vec<_>, _>>()?;
    Ok(MatrixReport { rows })
}

pub fn full_matrix(cfg: &LabConfig) -> Result<MatrixReport, ProtocolError> {
    matrix(cfg, &MitigationSet::matrix_rows())
}

/// Pairs `(smaller, larger)` of subsets where the larger set leaks but the
/// smaller one does not. Empty when protection is monotone.
pub fn monotonicity_violations(report: &MatrixReport) -> Vec<(Variant, MitigationSet, MitigationSet)> {
    let mut out = Vec::new();
    for a in &report.rows {
        for b in &report.rows {
            if a.variant == b.variant && a.mitigation != b.mitigation && a.mitigation.is_subset(b.mitigation) && !a.leaked && b.leaked {
                out.push((a.variant, a.mitigation, b.mitigation));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SweepPoint {
    pub window: usize,
    pub leaked: bool,
    pub bytes_recovered: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SweepReport {
    pub variant: Variant,
    pub mitigation: MitigationSet,
    pub points: Vec<SweepPoint>,
    /// Smallest window that leaks, if leakage is monotone in the window.
    pub w_star: Option<usize>,
    pub monotone: bool,
}

/// Evaluates `variant` under `set` for each speculation window in `windows`.
pub fn window_sweep(
    variant: Variant,
    set: MitigationSet,
    cfg: &LabConfig,
    windows: impl IntoIterator<Item = usize>,
) -> Result<SweepReport, ProtocolError> {
    let windows: Vec<usize> = windows.into_iter().collect();
    let mut points = windows
        .into_par_iter()
        .map(|window| {
            let mut cfg = cfg.clone();
            cfg.pipeline.window = window;
            let e = evaluate(variant, set, &cfg)?;
            Ok(SweepPoint { window, leaked: e.leaked, bytes_recovered: e.bytes_recovered })
        })
        .collect::<Result<Vec<_>, ProtocolError>>()?;
    points.sort_by_key(|p| p.window);
    let first = points.iter().position(|p| p.leaked);
    let monotone = first.is_none_or(|i| points[i..].iter().all(|p| p.leaked));
    let w_star = first.filter(|_| monotone).map(|i| points[i].window);
    Ok(SweepReport { variant, mitigation: set, points, w_star, monotone })
}
