//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! fails.

mod common;

use std::collections::{HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speclab::config::LabConfig;
use speclab::gadgets::{build_gadget, GadgetSpec};
use speclab::isa::PAGE_SIZE;
use speclab::mitigations::{apply_lenient, evaluate, full_matrix, matrix, monotonicity_violations, window_sweep, MitigationSet};
use speclab::pipeline::{reference_run, run, Variant};
use speclab::predictors::{Btb, Direction, Pht, Rsb};
use speclab::speconnector::{covert_channel_test, recover_secret, Schedule};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn spec(variant: Variant, cfg: &LabConfig, secret: &[u8]) -> GadgetSpec {
    GadgetSpec { training: cfg.attack.training, ..GadgetSpec::new(variant, cfg.layout(secret).unwrap()) }
}

fn pht_leak() -> Outcome {
    let cfg = LabConfig::default();
    let secret = cfg.attack.secret.as_bytes().to_vec();
    ensure(secret.len() == 16, || "default secret is not 16 bytes".into())?;
    let start = Instant::now();
    let report = recover_secret(&spec(Variant::Pht, &cfg, &secret), 16, Schedule::from_config(&cfg), &cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let correct = report.correct(&secret);
    ensure(correct == 16, || format!("{correct}/16 bytes correct: {:?}", report.recovered_text))?;
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("16/16 bytes ({:?}) in {:.3}s", report.recovered_text, elapsed.as_secs_f64()))
}

fn covert_pattern() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let pattern: Vec<u8> = (0..256).map(|_| rng.gen()).collect();
    let r = covert_channel_test(&pattern, &LabConfig::default()).map_err(|e| e.to_string())?;
    let wrong = pattern.iter().zip(&r.reconstructed).filter(|(a, b)| a != b).count();
    ensure(r.exact, || format!("{} bytes received, {wrong} wrong", r.reconstructed.len()))?;
    Ok("256/256 random bytes reconstructed".into())
}

fn oracle_equivalence() -> Outcome {
    let (mut divergences, mut frames, mut squashes) = (Vec::new(), 0, 0);
    let programs = 1000;
    for seed in 0..programs {
        let case = common::random_case(seed, common::GenOptions::default());
        let (mut uarch, cfg) = common::random_machine(&mut ChaCha8Rng::seed_from_u64(!seed));
        let expected = reference_run(&case.program, case.arch.clone(), &case.inputs);
        match run(&case.program, case.arch.clone(), &mut uarch, &cfg, &case.inputs) {
            Ok(out) => {
                frames += out.trace.frames.len();
                squashes += out.trace.squashes().count();
                if expected.as_ref() != Ok(&out.arch) {
                    divergences.push(seed);
                }
            }
            Err(e) => {
                if expected.err() != Some(e) {
                    divergences.push(seed);
                }
            }
        }
    }
    ensure(divergences.is_empty(), || format!("{} divergences, first seeds {:?}", divergences.len(), &divergences[..divergences.len().min(5)]))?;
    Ok(format!("{programs} programs, 0 divergences ({frames} frames, {squashes} squashes)"))
}

fn rollback_asymmetry() -> Outcome {
    let cfg = LabConfig::default();
    let secret = cfg.attack.secret.as_bytes();
    let gadget = build_gadget(&spec(Variant::Pht, &cfg, secret)).map_err(|e| e.to_string())?;
    let pcfg = cfg.pipeline_config();
    let mut uarch = cfg.machine().map_err(|e| e.to_string())?;
    let fresh = || common::gadget_arch(&gadget);
    let mut memory = fresh().memory;
    for j in 0..cfg.attack.training {
        let arch = speclab::pipeline::ArchState { memory, ..fresh() };
        memory = run(&gadget.program, arch, &mut uarch, &pcfg, &gadget.training_inputs(j)).map_err(|e| e.to_string())?.arch.memory;
    }
    let byte = 5;
    let line = gadget.layout.magic_base + u64::from(secret[byte]) * PAGE_SIZE;
    uarch.flush(gadget.condition_addr.unwrap());
    uarch.flush(line);
    let arch = speclab::pipeline::ArchState { memory, ..fresh() };
    let inputs = gadget.exploit_inputs(byte);

    let mut non_spec = uarch.clone();
    let mut off = pcfg.clone();
    off.window = 0;
    let spec_out = run(&gadget.program, arch.clone(), &mut uarch, &pcfg, &inputs).map_err(|e| e.to_string())?;
    let plain_out = run(&gadget.program, arch.clone(), &mut non_spec, &off, &inputs).map_err(|e| e.to_string())?;
    let reference = reference_run(&gadget.program, arch, &inputs).map_err(|e| e.to_string())?;

    ensure(spec_out.arch == plain_out.arch && plain_out.arch == reference, || "architectural states differ".into())?;
    ensure(spec_out.trace.squashes().count() >= 1, || "no squash in the exploit round".into())?;
    ensure(uarch.is_cached(line), || "secret line missing after speculative run".into())?;
    ensure(!non_spec.is_cached(line), || "secret line present without speculation".into())?;
    Ok(format!(
        "equal ArchStates; line for secret[{byte}]={:#04x} cached only with speculation ({} transient)",
        secret[byte],
        spec_out.trace.transient_total()
    ))
}

fn mitigation_matrix() -> Outcome {
    let cfg = LabConfig::default();
    let report = full_matrix(&cfg).map_err(|e| e.to_string())?;
    let mismatches: Vec<String> = report.mismatches().iter().map(|e| format!("{}/{}", e.variant, e.mitigation)).collect();
    ensure(mismatches.is_empty(), || format!("unexpected cells: {}", mismatches.join(" ")))?;
    let subsets: Vec<MitigationSet> = MitigationSet::all_subsets().collect();
    let all = matrix(&cfg, &subsets).map_err(|e| e.to_string())?;
    let violations = monotonicity_violations(&all);
    ensure(violations.is_empty(), || format!("{} monotonicity violations, e.g. {:?}", violations.len(), violations[0]))?;
    ensure(all.mismatches().is_empty(), || format!("{} subset cells differ from expectation", all.mismatches().len()))?;
    Ok(format!("{} matrix cells exact; monotone over {} subset cells", report.rows.len(), all.rows.len()))
}

fn semantic_preservation() -> Outcome {
    let cfg = LabConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checked = 0;
    for variant in Variant::ALL {
        for slow in [true, false] {
            let spec = GadgetSpec { slow_resolution: slow, ..spec(variant, &cfg, cfg.attack.secret.as_bytes()) };
            let gadget = build_gadget(&spec).map_err(|e| e.to_string())?;
            let arch = common::gadget_arch(&gadget);
            for set in MitigationSet::matrix_rows().into_iter().skip(1) {
                let rewritten = apply_lenient(&gadget.program, set).map_err(|e| e.to_string())?;
                for _ in 0..100 {
                    let inputs = [rng.gen_range(0..64), rng.gen_range(0..2)];
                    common::same_behavior(&gadget.program, &rewritten, &arch, &inputs)
                        .map_err(|e| format!("{variant} slow={slow} {set}: {e}"))?;
                    checked += 1;
                }
            }
        }
    }
    let opts = common::GenOptions { code_pointers_in_memory: false, ..Default::default() };
    let mut programs = 0;
    for seed in 0..100 {
        let case = common::random_case(seed, opts);
        for set in MitigationSet::all_subsets() {
            let rewritten = apply_lenient(&case.program, set).map_err(|e| e.to_string())?;
            common::same_behavior(&case.program, &rewritten, &case.arch, &case.inputs).map_err(|e| format!("random program {seed} {set}: {e}"))?;
            programs += 1;
        }
    }
    Ok(format!("{checked} gadget runs and {programs} random-program runs unchanged"))
}

fn window_sensitivity() -> Outcome {
    let mut cfg = LabConfig::default();
    cfg.pipeline.window = 0;
    for v in Variant::ALL {
        let e = evaluate(v, MitigationSet::NONE, &cfg).map_err(|e| e.to_string())?;
        ensure(!e.leaked, || format!("{v} leaks with W=0"))?;
    }
    let sweep = window_sweep(Variant::Pht, MitigationSet::NONE, &LabConfig::default(), 0..=64).map_err(|e| e.to_string())?;
    ensure(sweep.monotone, || "leakage is not monotone in W".into())?;
    let w = sweep.w_star.ok_or("PHT never leaks for W <= 64")?;
    ensure(w > 0, || "W* = 0".into())?;
    Ok(format!("no variant leaks at W=0; PHT leaks iff W >= {w}"))
}

fn aslr() -> Outcome {
    let mut seen = Vec::new();
    for seed in [1, 2] {
        let mut cfg = LabConfig::default();
        cfg.layout.aslr_seed = Some(seed);
        let secret = cfg.attack.secret.as_bytes();
        let s = spec(Variant::Pht, &cfg, secret);
        let report = recover_secret(&s, secret.len(), Schedule::from_config(&cfg), &cfg).map_err(|e| e.to_string())?;
        seen.push((s.layout.region_base, s.layout.secret_base - s.layout.data_base, report.recovered()));
    }
    let (a, b) = (&seen[0], &seen[1]);
    ensure(a.0 != b.0, || "region bases are equal".into())?;
    ensure(a.1 == b.1, || "secret offset moved".into())?;
    ensure(a.2 == b.2 && a.2 == LabConfig::default().attack.secret.as_bytes(), || "recovered secrets differ".into())?;
    Ok(format!("bases {:#x} / {:#x}, secret offset {:#x} in both, same {}-byte secret", a.0, b.0, a.1, a.2.len()))
}

fn predictors() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut pht = Pht::new(64);
    let mut model = [1i32; 64];
    for _ in 0..1_000_000 {
        let site = rng.gen_range(0..4096);
        let taken = rng.gen_bool(0.5);
        pht.update(site, Direction::from_taken(taken));
        let m = &mut model[site % 64];
        *m = (*m + if taken { 1 } else { -1 }).clamp(0, 3);
        let c = pht.counter(site);
        ensure(c <= 3 && i32::from(c) == *m, || format!("counter {c} vs model {m}"))?;
        ensure(pht.predict(site).is_taken() == (c >= 2), || "prediction disagrees with counter".into())?;
    }

    for depth in [1, 4, 16] {
        let mut rsb = Rsb::new(depth);
        let mut deque: VecDeque<usize> = VecDeque::new();
        for _ in 0..100_000 {
            if rng.gen_bool(0.55) {
                let v = rng.gen();
                rsb.push(v);
                deque.push_back(v);
                if deque.len() > depth {
                    deque.pop_front();
                }
            } else {
                ensure(rsb.pop() == deque.pop_back(), || format!("RSB depth {depth} diverged from deque"))?;
            }
        }
    }

    let mut btb = Btb::new(256);
    let mut map = HashMap::new();
    for _ in 0..100_000 {
        let site = rng.gen_range(0..256);
        let target = rng.gen_range(0..1 << 20);
        btb.update(site, target);
        map.insert(site, target);
        let probe = rng.gen_range(0..256);
        ensure(btb.predict(probe) == map.get(&probe).copied(), || format!("BTB wrong at site {probe}"))?;
        ensure(btb.predict(site) == Some(target), || "BTB lost a fresh update".into())?;
    }
    Ok("PHT in [0,3] over 10^6 updates; RSB matches deque; BTB matches map".into())
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("pht end-to-end leak", pht_leak),
        ("covert channel", covert_pattern),
        ("oracle equivalence", oracle_equivalence),
        ("rollback asymmetry", rollback_asymmetry),
        ("mitigation matrix", mitigation_matrix),
        ("semantic preservation", semantic_preservation),
        ("window sensitivity", window_sensitivity),
        ("aslr", aslr),
        ("predictor properties", predictors),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
        }
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
