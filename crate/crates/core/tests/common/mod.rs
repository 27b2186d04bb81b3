//! Random program generator shared by the differential and acceptance tests.
//!
//! Programs terminate by construction: branches and indirect jumps only go
//! forward, and calls target leaf functions placed after the main `HALT`.
//! Every memory access goes through a masked address built from `r15`, so
//! committed and transient accesses stay inside a 64 KiB image. `r13`,
//! `r14` and `r15` are never named by generated code, and `r11` only ever
//! holds code addresses.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speclab::isa::{assemble, MemoryImage, Program};
use speclab::pipeline::{ArchState, MicroArchState, PipelineConfig};

pub const FUZZ_IMAGE: u64 = 1 << 16;

#[derive(Debug, Clone, Copy)]
pub struct GenOptions {
    /// Route some JMPI targets through memory so the BTB has to predict.
    /// Stored code addresses change under rewrites, so semantic-preservation
    /// tests turn this off.
    pub code_pointers_in_memory: bool,
    pub max_segments: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions { code_pointers_in_memory: true, max_segments: 8 }
    }
}

#[derive(Debug, Clone)]
pub struct FuzzCase {
    pub source: String,
    pub program: Program,
    pub arch: ArchState,
    pub inputs: Vec<u64>,
}

struct Gen<'a> {
    rng: &'a mut ChaCha8Rng,
    opts: GenOptions,
    out: String,
    loaded: Option<String>,
}

impl Gen<'_> {
    /// Any data register: `r0..r10` or `r12`.
    fn reg(&mut self) -> String {
        match self.rng.gen_range(0..12) {
            11 => "r12".to_string(),
            r => format!("r{r}"),
        }
    }

    /// Data register other than `r12`, which address snippets use.
    fn data_reg(&mut self) -> String {
        format!("r{}", self.rng.gen_range(0..11))
    }

    fn imm(&mut self) -> u64 {
        match self.rng.gen_range(0..4) {
            0 => self.rng.gen_range(0..4),
            1 => self.rng.gen_range(0..256),
            2 => self.rng.gen(),
            _ => 1 << self.rng.gen_range(0..64),
        }
    }

    fn line(&mut self, s: String) {
        self.out.push_str("    ");
        self.out.push_str(&s);
        self.out.push('\n');
    }

    fn base(&mut self, off: u64) {
        self.line(format!("MOVI r12, {off:#x}"));
        self.line("ADD r12, r15".into());
    }

    fn alu(&mut self) {
        let d = self.reg();
        match self.rng.gen_range(0..6) {
            0 => {
                let v = self.imm();
                self.line(format!("MOVI {d}, {v:#x}"));
            }
            1 => {
                let (a, b) = (self.reg(), self.reg());
                self.line(format!("SELMASK {d}, {a}, {b}"));
            }
            k => {
                let op = ["ADD", "AND", "SHL"][k % 3];
                let src = if self.rng.gen_bool(0.5) { self.reg() } else { format!("{:#x}", self.imm()) };
                self.line(format!("{op} {d}, {src}"));
            }
        }
    }

    fn load(&mut self) {
        let (d, i) = (self.reg(), self.data_reg());
        let page = self.rng.gen_bool(0.3);
        if page {
            self.line(format!("AND {i}, 0x7"));
            self.base(0x8000);
        } else {
            self.line(format!("AND {i}, 0xff"));
            let off = self.rng.gen_range(0..0x70) * 0x100;
            self.base(off);
        }
        if self.rng.gen_bool(0.4) {
            self.line("FLUSH r12, 0".into());
        }
        let scale = if page { 4096 } else { 1 };
        self.line(format!("LOADB {d}, r12, {i}, {scale}"));
        self.loaded = Some(d);
    }

    fn store(&mut self) {
        let s = self.data_reg();
        let off = self.rng.gen_range(0..0x7000);
        self.base(off);
        let k: i64 = self.rng.gen_range(-8..8);
        let k = if off as i64 + k < 0 { 0 } else { k };
        self.line(format!("STORE r12, {k}, {s}"));
    }

    fn flush(&mut self) {
        let off = self.rng.gen_range(0..0x10000);
        self.base(off);
        self.line("FLUSH r12, 0".into());
    }

    /// Code addresses live only in `r11` so no data value depends on one.
    fn jump(&mut self, target: &str) {
        let r = "r11";
        self.line(format!("MOVL {r}, {target}"));
        if self.opts.code_pointers_in_memory && self.rng.gen_bool(0.6) {
            let z = self.data_reg();
            let off = 0x7000 + self.rng.gen_range(0..0x100);
            self.base(off);
            self.line(format!("STORE r12, 0, {r}"));
            self.line("FLUSH r12, 0".into());
            self.line(format!("MOVI {z}, 0x0"));
            self.line(format!("LOADB {r}, r12, {z}, 1"));
        }
        self.line(format!("JMPI {r}"));
    }

    /// Straight-line segments `{prefix}{i}` ending at `{prefix}end`.
    fn body(&mut self, prefix: &str, segments: usize, calls: usize, indirect: bool) {
        for seg in 0..segments {
            self.out.push_str(&format!("{prefix}{seg}:\n"));
            for _ in 0..self.rng.gen_range(1..6) {
                let later = |rng: &mut ChaCha8Rng| {
                    let t = rng.gen_range(seg + 1..=segments);
                    if t == segments { format!("{prefix}end") } else { format!("{prefix}{t}") }
                };
                match self.rng.gen_range(0..20) {
                    0..=5 => self.alu(),
                    6..=9 => self.load(),
                    10..=11 => self.store(),
                    12 => self.flush(),
                    13 => self.line("FENCE".into()),
                    14..=16 => {
                        let (mut a, b) = (self.reg(), self.reg());
                        if let Some(r) = self.loaded.clone().filter(|_| self.rng.gen_bool(0.7)) {
                            a = r;
                        }
                        let t = later(self.rng);
                        self.line(format!("CMPBLT {a}, {b}, {t}"));
                    }
                    17 if indirect => {
                        let t = later(self.rng);
                        self.jump(&t);
                    }
                    18 | 19 if calls > 0 => {
                        let f = self.rng.gen_range(0..calls);
                        self.line(format!("CALL f{f}_0"));
                    }
                    _ => self.alu(),
                }
            }
        }
        self.out.push_str(&format!("{prefix}end:\n"));
    }
}

pub fn random_source(rng: &mut ChaCha8Rng, opts: GenOptions) -> String {
    let functions = rng.gen_range(0..3);
    let mut g = Gen { rng, opts, out: String::new(), loaded: None };
    let main_segments = g.rng.gen_range(1..=opts.max_segments);
    g.body("m", main_segments, functions, true);
    g.line("HALT".into());
    for f in 0..functions {
        let segments = g.rng.gen_range(1..=3);
        g.body(&format!("f{f}_"), segments, 0, false);
        g.line("RET".into());
    }
    g.out
}

pub fn random_image(rng: &mut ChaCha8Rng) -> MemoryImage {
    let mut img = MemoryImage::new(FUZZ_IMAGE).unwrap();
    for _ in 0..rng.gen_range(0..512) {
        let addr = rng.gen_range(0..FUZZ_IMAGE);
        img.write(addr, rng.gen());
    }
    img
}

pub fn random_case(seed: u64, opts: GenOptions) -> FuzzCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // code pointers are stored as bytes
    let (source, program) = loop {
        let source = random_source(&mut rng, opts);
        let program = assemble(&source).unwrap_or_else(|e| panic!("generator bug: {e}\n{source}"));
        if program.len() < 256 {
            break (source, program);
        }
    };
    let arch = ArchState::new(random_image(&mut rng));
    let n = rng.gen_range(0..=12);
    let inputs = (0..n).map(|_| if rng.gen_bool(0.5) { rng.gen_range(0..300) } else { rng.gen() }).collect();
    FuzzCase { source, program, arch, inputs }
}

/// Architectural outputs a rewrite must preserve: everything except the
/// scratch and link registers and the final pc.
pub fn observable(a: &ArchState) -> (Vec<u64>, &[u8], bool) {
    let regs = a.regs.iter().enumerate().filter(|&(i, _)| i != 13 && i != 14).map(|(_, &v)| v).collect();
    (regs, a.memory.as_bytes(), a.halted)
}

/// Victim state at the start of an invocation of `gadget`.
pub fn gadget_arch(gadget: &speclab::gadgets::Gadget) -> ArchState {
    let mut arch = ArchState::new(gadget.initial_image());
    arch.regs[15] = gadget.layout.region_base;
    arch
}

/// Original label address to the same label's address in `b`.
pub fn relocation(a: &Program, b: &Program) -> std::collections::HashMap<u64, u64> {
    a.labels()
        .iter()
        .filter_map(|d| b.find_label(&d.name).map(|l| (d.index as u64, b.target(l) as u64)))
        .collect()
}

/// Runs both programs on the reference interpreter and compares outputs.
/// Values may differ only where `a` holds a code address and `b` holds the
/// relocated address of the same label.
pub fn same_behavior(a: &Program, b: &Program, arch: &ArchState, inputs: &[u64]) -> Result<(), String> {
    use speclab::pipeline::reference_run;
    let reloc = relocation(a, b);
    let same = |x: u64, y: u64| x == y || reloc.get(&x) == Some(&y);
    match (reference_run(a, arch.clone(), inputs), reference_run(b, arch.clone(), inputs)) {
        (Ok(x), Ok(y)) => {
            let (rx, mx, hx) = observable(&x);
            let (ry, my, hy) = observable(&y);
            let regs = rx.iter().zip(&ry).all(|(&p, &q)| same(p, q));
            let mem = mx.chunks(4096).zip(my.chunks(4096)).all(|(pa, pb)| {
                pa == pb || pa.iter().zip(pb).all(|(&p, &q)| same(p.into(), q.into()))
            });
            if regs && mem && hx == hy {
                Ok(())
            } else {
                Err(format!("inputs {inputs:?}: {rx:?} vs {ry:?}, memory equal: {mem}"))
            }
        }
        (Err(_), Err(_)) => Ok(()),
        (x, y) => Err(format!("inputs {inputs:?}: {:?} vs {:?}", x.map(|s| s.regs), y.map(|s| s.regs))),
    }
}

/// Machine with random predictor and cache geometry, window and bypass policy.
pub fn random_machine(rng: &mut ChaCha8Rng) -> (MicroArchState, PipelineConfig) {
    let cache = speclab::cache::CacheConfig { sets: 1 << rng.gen_range(0..7), ways: rng.gen_range(1..9), ..Default::default() };
    let uarch = MicroArchState::new(cache, 1 << rng.gen_range(0..8), 1 << rng.gen_range(0..6), rng.gen_range(0..8)).unwrap();
    let cfg = PipelineConfig {
        window: rng.gen_range(0..=80),
        store_bypass: speclab::predictors::StoreBypassPolicy { enabled: rng.gen() },
        ..PipelineConfig::default()
    };
    (uarch, cfg)
}
