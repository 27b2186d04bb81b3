//! Victim programs and their memory layout.
//!
//! Every gadget addresses memory relative to `r15`, which the harness sets to
//! the layout's `region_base`, so the same program text runs under any ASLR
//! placement. Victim inputs: `r1` is the attacker-controlled index `x`,
//! `r2` selects training (0) or exploit (1) behavior where a gadget needs it.
//!
//! Offsets from `region_base`:
//!
//! | offset     | region                                   |
//! |------------|------------------------------------------|
//! | `0x000`    | `length_of_data` (one byte)              |
//! | `0x040`    | `tmp`                                    |
//! | `0x080`    | STL address cell (holds 0)               |
//! | `0x0c0`    | STL request slot                         |
//! | `0x100`    | two-entry code pointer table             |
//! | `0x1000`   | sink page                                |
//! | `0x2000`   | `data`, immediately followed by the secret |
//! | `0x3000`   | covert-channel pattern buffer            |
//! | `0x100000` | 256 magic pages (the victim's lookup table) |
//! | `0x200000` | 256 receiver frames                      |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::isa::{assemble, AsmError, MemoryImage, Program, PAGE_SIZE};
use crate::pipeline::Variant;

pub const LEN_OFF: u64 = 0x000;
pub const TMP_OFF: u64 = 0x040;
pub const STL_CELL_OFF: u64 = 0x080;
pub const STL_SLOT_OFF: u64 = 0x0c0;
pub const JUMP_TABLE_OFF: u64 = 0x100;
pub const SINK_OFF: u64 = 0x1000;
pub const DATA_OFF: u64 = 0x2000;
pub const PATTERN_OFF: u64 = 0x3000;
pub const MAGIC_OFF: u64 = 0x10_0000;
pub const LOOKUP_OFF: u64 = 0x20_0000;
/// Bytes from `region_base` to the end of the last region.
pub const REGION_SPAN: u64 = LOOKUP_OFF + TABLE_PAGES * PAGE_SIZE;

pub const TABLE_PAGES: u64 = 256;
pub const DEFAULT_DATA_LEN: u64 = 16;
pub const DEFAULT_IMAGE_SIZE: u64 = 4 << 20;
pub const DEFAULT_MAGIC: u64 = 0x5350_4543_5452_4521;
pub const DEFAULT_TRAINING: usize = 8;
const TMP_INIT: u8 = 0xff;

pub const MAX_SECRET_LEN: usize = (PATTERN_OFF - DATA_OFF - DEFAULT_DATA_LEN) as usize;
pub const MAX_PATTERN_LEN: usize = PAGE_SIZE as usize;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GadgetError {
    #[error("image of {got} bytes cannot hold the {needed}-byte victim region (512 table pages plus data)")]
    ImageTooSmall { needed: u64, got: u64 },
    #[error("image size {0} is not a power of two")]
    BadImageSize(u64),
    #[error("secret of {0} bytes exceeds the {MAX_SECRET_LEN}-byte secret area")]
    SecretTooLong(usize),
    #[error("covert pattern must be between 1 and {MAX_PATTERN_LEN} bytes, got {0}")]
    BadPattern(usize),
    #[error("gadget builder for {expected} called with a {got} spec")]
    WrongVariant { expected: Variant, got: Variant },
    #[error("training repetitions must be at least 1")]
    NoTraining,
    #[error("generated gadget failed to assemble: {0}")]
    Asm(#[from] AsmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Region {
    pub name: &'static str,
    pub start: u64,
    pub len: u64,
    pub page_aligned: bool,
}

/// Absolute addresses of every victim region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryLayout {
    pub image_size: u64,
    pub region_base: u64,
    pub data_len_addr: u64,
    pub tmp_addr: u64,
    pub stl_cell_addr: u64,
    pub stl_slot_addr: u64,
    pub jump_table_addr: u64,
    pub sink_base: u64,
    pub data_base: u64,
    /// `length_of_data`
    pub data_len: u64,
    pub secret_base: u64,
    #[serde(skip)]
    pub secret: Vec<u8>,
    pub pattern_base: u64,
    pub magic_base: u64,
    pub lookup_base: u64,
    pub magic: u64,
}

/// Fixed layout when `aslr_seed` is `None` (`region_base = 0`); otherwise a
/// page-aligned `region_base` drawn from ChaCha8 seeded with the value,
/// uniformly over every placement that fits. Offsets inside the region never
/// change.
pub fn standard_layout(image_size: u64, aslr_seed: Option<u64>) -> Result<MemoryLayout, GadgetError> {
    if !image_size.is_power_of_two() {
        return Err(GadgetError::BadImageSize(image_size));
    }
    if image_size < REGION_SPAN {
        return Err(GadgetError::ImageTooSmall { needed: REGION_SPAN, got: image_size });
    }
    let region_base = match aslr_seed {
        None => 0,
        Some(seed) => {
            let slots = (image_size - REGION_SPAN) / PAGE_SIZE;
            ChaCha8Rng::seed_from_u64(seed).gen_range(0..=slots) * PAGE_SIZE
        }
    };
    let b = region_base;
    Ok(MemoryLayout {
        image_size,
        region_base: b,
        data_len_addr: b + LEN_OFF,
        tmp_addr: b + TMP_OFF,
        stl_cell_addr: b + STL_CELL_OFF,
        stl_slot_addr: b + STL_SLOT_OFF,
        jump_table_addr: b + JUMP_TABLE_OFF,
        sink_base: b + SINK_OFF,
        data_base: b + DATA_OFF,
        data_len: DEFAULT_DATA_LEN,
        secret_base: b + DATA_OFF + DEFAULT_DATA_LEN,
        secret: Vec::new(),
        pattern_base: b + PATTERN_OFF,
        magic_base: b + MAGIC_OFF,
        lookup_base: b + LOOKUP_OFF,
        magic: DEFAULT_MAGIC,
    })
}

impl MemoryLayout {
    pub fn with_secret(mut self, secret: &[u8]) -> Result<MemoryLayout, GadgetError> {
        if secret.len() > MAX_SECRET_LEN {
            return Err(GadgetError::SecretTooLong(secret.len()));
        }
        self.secret = secret.to_vec();
        Ok(self)
    }

    pub fn with_magic(mut self, magic: u64) -> MemoryLayout {
        self.magic = magic;
        self
    }

    pub fn regions(&self) -> Vec<Region> {
        let r = |name, start, len, page_aligned| Region { name, start, len, page_aligned };
        vec![
            r("length_of_data", self.data_len_addr, 1, false),
            r("tmp", self.tmp_addr, 1, false),
            r("stl_cell", self.stl_cell_addr, 1, false),
            r("stl_slot", self.stl_slot_addr, 1, false),
            r("jump_table", self.jump_table_addr, 2, false),
            r("sink", self.sink_base, PAGE_SIZE, true),
            r("data", self.data_base, self.data_len, false),
            r("secret", self.secret_base, self.secret.len() as u64, false),
            r("pattern", self.pattern_base, MAX_PATTERN_LEN as u64, false),
            r("magic", self.magic_base, TABLE_PAGES * PAGE_SIZE, true),
            r("lookup", self.lookup_base, TABLE_PAGES * PAGE_SIZE, true),
        ]
    }

    /// Page id of magic page `i` (the victim's lookup table).
    pub fn magic_page(&self, i: u64) -> u64 {
        self.magic_base / PAGE_SIZE + i
    }

    /// Page id of receiver frame `i`.
    pub fn frame_page(&self, i: u64) -> u64 {
        self.lookup_base / PAGE_SIZE + i
    }

    /// Fresh victim memory: `length_of_data`, `data[j] = j`, the secret,
    /// `tmp = 0xff` and the magic pages.
    pub fn initial_image(&self) -> MemoryImage {
        let mut img = MemoryImage::new(self.image_size).expect("layout image size validated");
        img.write(self.data_len_addr, self.data_len as u8);
        img.write(self.tmp_addr, TMP_INIT);
        let data: Vec<u8> = (0..self.data_len).map(|j| j as u8).collect();
        img.write_slice(self.data_base, &data);
        img.write_slice(self.secret_base, &self.secret);
        let page: Vec<u8> = self.magic.to_le_bytes().iter().copied().cycle().take(PAGE_SIZE as usize).collect();
        for i in 0..TABLE_PAGES {
            img.write_slice(self.magic_base + i * PAGE_SIZE, &page);
        }
        img
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GadgetSpec {
    pub variant: Variant,
    /// Training invocations before each exploit round.
    pub training: usize,
    /// When false, the value the speculation hinges on comes from a register
    /// instead of a flushed memory cell, so it resolves immediately.
    pub slow_resolution: bool,
    pub layout: MemoryLayout,
}

impl GadgetSpec {
    pub fn new(variant: Variant, layout: MemoryLayout) -> GadgetSpec {
        GadgetSpec { variant, training: DEFAULT_TRAINING, slow_resolution: true, layout }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GadgetKind {
    Spectre(Variant),
    CovertSender,
}

#[derive(Debug, Clone)]
pub struct Gadget {
    pub kind: GadgetKind,
    pub source: String,
    pub program: Program,
    pub layout: MemoryLayout,
    /// Extra bytes written over the layout's initial image.
    pub patches: Vec<(u64, Vec<u8>)>,
    /// Address whose line gates resolution of the speculated instruction.
    pub condition_addr: Option<u64>,
}

impl Gadget {
    pub fn initial_image(&self) -> MemoryImage {
        let mut img = self.layout.initial_image();
        for (addr, bytes) in &self.patches {
            img.write_slice(*addr, bytes);
        }
        img
    }

    /// Inputs for the `j`-th training invocation (in-bounds `x`).
    pub fn training_inputs(&self, j: usize) -> [u64; 2] {
        [j as u64 % self.layout.data_len, 0]
    }

    /// Inputs for the exploit invocation targeting secret byte `i`.
    pub fn exploit_inputs(&self, i: usize) -> [u64; 2] {
        [self.layout.data_len + i as u64, 1]
    }

    pub fn with_program(&self, program: Program) -> Gadget {
        let source = program_header(self.kind) + &crate::isa::disassemble(&program);
        Gadget { program, source, ..self.clone() }
    }
}

fn program_header(kind: GadgetKind) -> String {
    match kind {
        GadgetKind::Spectre(v) => format!("# spectre-{v} gadget\n"),
        GadgetKind::CovertSender => "# covert-channel sender\n".to_string(),
    }
}

fn addr(reg: &str, off: u64, comment: &str) -> String {
    format!("    MOVI {reg}, {off:#x}\n    ADD {reg}, r15    # {comment}\n")
}

fn common_setup() -> String {
    let mut s = String::from("    MOVI r0, 0x0\n");
    s += &addr("r5", DATA_OFF, "data");
    s += &addr("r6", MAGIC_OFF, "lookup_table");
    s += &addr("r7", TMP_OFF, "&tmp");
    s
}

// tmp &= lookup_table[data[x] << 12]
const ENCODER: &str = "    LOADB r8, r5, r1, 1
    LOADB r9, r6, r8, 4096
    LOADB r10, r7, r0, 1
    AND r10, r9
    STORE r7, 0, r10
    HALT
";

fn finish(kind: GadgetKind, src: String, layout: &MemoryLayout, condition_off: Option<u64>) -> Result<Gadget, GadgetError> {
    let program = assemble(&src)?;
    Ok(Gadget {
        kind,
        source: src,
        program,
        layout: layout.clone(),
        patches: Vec::new(),
        condition_addr: condition_off.map(|o| layout.region_base + o),
    })
}

fn check(spec: &GadgetSpec, expected: Variant) -> Result<(), GadgetError> {
    if spec.variant != expected {
        return Err(GadgetError::WrongVariant { expected, got: spec.variant });
    }
    if spec.training == 0 {
        return Err(GadgetError::NoTraining);
    }
    Ok(())
}

/// Bounds check guarding a dependent double load.
pub fn build_pht_index_gadget(spec: &GadgetSpec) -> Result<Gadget, GadgetError> {
    check(spec, Variant::Pht)?;
    let mut s = program_header(GadgetKind::Spectre(Variant::Pht));
    s += &common_setup();
    if spec.slow_resolution {
        s += &addr("r3", LEN_OFF, "&length_of_data");
        s += "    FLUSH r3, 0\n    LOADB r4, r3, r0, 1\n";
    } else {
        s += &format!("    MOVI r4, {:#x}\n", spec.layout.data_len);
    }
    s += "    CMPBLT r1, r4, in_bounds\n    HALT\nin_bounds:\n";
    s += ENCODER;
    finish(GadgetKind::Spectre(Variant::Pht), s, &spec.layout, spec.slow_resolution.then_some(LEN_OFF))
}

/// `r11 = if r2 == 0 { label_a } else { label_b }` without branches, for r2 in {0, 1}.
fn select_label(dst: &str, a: &str, b: &str) -> String {
    format!(
        "    MOVI r12, 0x1
    SELMASK r9, r2, r12
    SELMASK r10, r0, r2
    MOVL {dst}, {a}
    AND {dst}, r9
    MOVL r12, {b}
    AND r12, r10
    ADD {dst}, r12
"
    )
}

/// Indirect jump through a code pointer. Training calls the handler that
/// holds the encoder; the exploit round points the jump at `safe` while the
/// BTB still predicts the handler.
pub fn build_btb_gadget(spec: &GadgetSpec) -> Result<Gadget, GadgetError> {
    check(spec, Variant::Btb)?;
    let mut s = program_header(GadgetKind::Spectre(Variant::Btb));
    s += &common_setup();
    if spec.slow_resolution {
        s += &addr("r3", JUMP_TABLE_OFF, "code pointer table");
        s += "    MOVL r4, handler
    STORE r3, 0, r4
    MOVL r4, safe
    STORE r3, 1, r4
    FLUSH r3, 0
    LOADB r11, r3, r2, 1
";
    } else {
        s += &select_label("r11", "handler", "safe");
    }
    s += "    JMPI r11\nhandler:\n";
    s += ENCODER;
    s += "safe:\n    HALT\n";
    finish(GadgetKind::Spectre(Variant::Btb), s, &spec.layout, spec.slow_resolution.then_some(JUMP_TABLE_OFF))
}

/// A call whose callee rewrites its own return address. The RSB predicts a
/// return to the call site, where the encoder sits; the real return goes to
/// `landing` in the exploit round.
pub fn build_rsb_gadget(spec: &GadgetSpec) -> Result<Gadget, GadgetError> {
    check(spec, Variant::Rsb)?;
    let mut s = program_header(GadgetKind::Spectre(Variant::Rsb));
    s += &common_setup();
    s += &addr("r3", JUMP_TABLE_OFF, "return address slots");
    s += "    CALL callee\n";
    s += ENCODER;
    s += "landing:\n    HALT\ncallee:\n";
    if spec.slow_resolution {
        s += "    STORE r3, 0, r14
    MOVL r4, landing
    STORE r3, 1, r4
    FLUSH r3, 0
    LOADB r14, r3, r2, 1
";
    } else {
        // r14 = r2 == 0 ? r14 : landing
        s += "    MOVI r12, 0x1
    SELMASK r9, r2, r12
    SELMASK r10, r0, r2
    AND r14, r9
    MOVL r12, landing
    AND r12, r10
    ADD r14, r12
";
    }
    s += "    RET\n";
    finish(GadgetKind::Spectre(Variant::Rsb), s, &spec.layout, spec.slow_resolution.then_some(JUMP_TABLE_OFF))
}

/// The victim records the request index, then sanitizes the slot with a
/// store whose address hangs on a slow load. A younger load of the slot may
/// bypass that store and see the stale index. An index of 0 steers the
/// encoder to the sink page instead of the lookup table.
pub fn build_stl_gadget(spec: &GadgetSpec) -> Result<Gadget, GadgetError> {
    check(spec, Variant::Stl)?;
    let mut s = program_header(GadgetKind::Spectre(Variant::Stl));
    s += "    MOVI r0, 0x0\n";
    s += &addr("r5", DATA_OFF, "data");
    s += &addr("r3", STL_SLOT_OFF, "request slot");
    s += &addr("r11", STL_CELL_OFF, "address cell");
    s += &addr("r12", SINK_OFF, "sink page");
    s += "    STORE r3, 0, r1\n";
    if spec.slow_resolution {
        s += "    FLUSH r11, 0\n    LOADB r4, r11, r0, 1\n";
    } else {
        s += "    MOVI r4, 0x0\n";
    }
    s += &format!(
        "    ADD r4, r3
    STORE r4, 0, r0
    LOADB r8, r3, r0, 1
    LOADB r9, r5, r8, 1
    SELMASK r10, r0, r8
    AND r9, r10
    MOVI r7, {:#x}
    AND r7, r10
    ADD r7, r12
    LOADB r9, r7, r9, 4096
    HALT
",
        MAGIC_OFF - SINK_OFF
    );
    finish(GadgetKind::Spectre(Variant::Stl), s, &spec.layout, spec.slow_resolution.then_some(STL_CELL_OFF))
}

pub fn build_gadget(spec: &GadgetSpec) -> Result<Gadget, GadgetError> {
    match spec.variant {
        Variant::Pht => build_pht_index_gadget(spec),
        Variant::Btb => build_btb_gadget(spec),
        Variant::Rsb => build_rsb_gadget(spec),
        Variant::Stl => build_stl_gadget(spec),
    }
}

/// Architecturally touches lookup page `pattern[r1]`: one pattern byte per
/// invocation.
pub fn build_covert_sender(pattern: &[u8], layout: &MemoryLayout) -> Result<Gadget, GadgetError> {
    if pattern.is_empty() || pattern.len() > MAX_PATTERN_LEN {
        return Err(GadgetError::BadPattern(pattern.len()));
    }
    let mut s = program_header(GadgetKind::CovertSender);
    s += "    MOVI r0, 0x0\n";
    s += &addr("r3", PATTERN_OFF, "pattern");
    s += &addr("r6", MAGIC_OFF, "lookup_table");
    s += "    LOADB r8, r3, r1, 1\n    LOADB r9, r6, r8, 4096\n    HALT\n";
    let mut g = finish(GadgetKind::CovertSender, s, layout, None)?;
    g.patches.push((layout.pattern_base, pattern.to_vec()));
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{disassemble, validate_layout, LayoutViolation};

    #[test]
    fn fixed_layout_constants() {
        let l = standard_layout(DEFAULT_IMAGE_SIZE, None).unwrap();
        assert_eq!(l.region_base, 0);
        assert_eq!(l.data_base, 0x2000);
        assert_eq!(l.secret_base, 0x2010);
        assert_eq!(l.magic_base, 0x10_0000);
        assert_eq!(l.lookup_base, 0x20_0000);
        let l = l.with_secret(b"KEY!").unwrap();
        assert_eq!(validate_layout(&l.initial_image(), &l), Ok(()));
    }

    #[test]
    fn aslr_moves_region_but_not_offsets() {
        let a = standard_layout(DEFAULT_IMAGE_SIZE, Some(1)).unwrap();
        let b = standard_layout(DEFAULT_IMAGE_SIZE, Some(2)).unwrap();
        assert_ne!(a.region_base, b.region_base);
        assert_eq!(a.secret_base - a.data_base, b.secret_base - b.data_base);
        assert_eq!(a.region_base % PAGE_SIZE, 0);
        for l in [a, b] {
            assert_eq!(validate_layout(&l.initial_image(), &l), Ok(()));
        }
    }

    #[test]
    fn small_image_rejected() {
        assert!(matches!(standard_layout(64 << 10, None), Err(GadgetError::ImageTooSmall { .. })));
    }

    #[test]
    fn misaligned_or_overlapping_layouts_flagged() {
        let mut l = standard_layout(DEFAULT_IMAGE_SIZE, None).unwrap();
        let img = l.initial_image();
        l.magic_base += 64;
        let v = validate_layout(&img, &l).unwrap_err();
        assert!(v.contains(&LayoutViolation::Alignment { region: "magic" }));

        let mut l = standard_layout(DEFAULT_IMAGE_SIZE, None).unwrap().with_secret(b"abc").unwrap();
        l.secret_base = l.lookup_base;
        let v = validate_layout(&img, &l).unwrap_err();
        assert!(v.contains(&LayoutViolation::Overlap { first: "secret", second: "lookup" }));
        assert!(v.contains(&LayoutViolation::Adjacency));
    }

    #[test]
    fn gadget_sources_round_trip() {
        let layout = standard_layout(DEFAULT_IMAGE_SIZE, None).unwrap();
        let tokens = |s: &str| -> Vec<String> {
            s.lines()
                .map(|l| l.split('#').next().unwrap())
                .flat_map(|l| l.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()).map(String::from).collect::<Vec<_>>())
                .collect()
        };
        for v in Variant::ALL {
            for slow in [true, false] {
                let spec = GadgetSpec { slow_resolution: slow, ..GadgetSpec::new(v, layout.clone()) };
                let g = build_gadget(&spec).unwrap();
                assert_eq!(tokens(&disassemble(&g.program)), tokens(&g.source), "{v} slow={slow}");
            }
        }
        let g = build_covert_sender(b"HI", &layout).unwrap();
        assert_eq!(tokens(&disassemble(&g.program)), tokens(&g.source));
    }

    #[test]
    fn builder_rejects_mismatched_spec() {
        let layout = standard_layout(DEFAULT_IMAGE_SIZE, None).unwrap();
        let spec = GadgetSpec::new(Variant::Btb, layout.clone());
        assert!(matches!(build_pht_index_gadget(&spec), Err(GadgetError::WrongVariant { .. })));
        let spec = GadgetSpec { training: 0, ..GadgetSpec::new(Variant::Pht, layout.clone()) };
        assert_eq!(build_pht_index_gadget(&spec).unwrap_err(), GadgetError::NoTraining);
        assert_eq!(build_covert_sender(&[], &layout).unwrap_err(), GadgetError::BadPattern(0));
    }

    #[test]
    fn magic_pages_filled() {
        let l = standard_layout(DEFAULT_IMAGE_SIZE, None).unwrap();
        let img = l.initial_image();
        let page = img.page(l.magic_page(255)).unwrap();
        assert!(page.chunks(8).all(|w| u64::from_le_bytes(w.try_into().unwrap()) == DEFAULT_MAGIC));
        assert!(img.page(l.frame_page(0)).unwrap().iter().all(|&b| b == 0));
    }
}
