//! Synthetic benchmark: every variant on three master seeds.

use std::time::Instant;

use scribseg::dataio::{synth_dataset, Dataset, SynthConfig};
use scribseg::densecrf::{product_grid, CrfParams};
use scribseg::emdriver::{self, net_hash, PipelineConfig, PipelineResult, RecursionState, Variant};
use scribseg::evalcli::{DiceReport, Table};
use scribseg::segnet::{NetConfig, TrainConfig};
use scribseg::UNKNOWN;

use super::Outcome;

const SEEDS: [u64; 3] = [1, 2, 3];
const WEAK: [Variant; 3] = [Variant::Uncertainty, Variant::SepCrfAndUnc, Variant::CrfRnn];

/// Desk-scale settings shared by every run of one seed.
pub fn bench_config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        master_seed: seed,
        net: NetConfig {
            base_channels: 8,
            dropout_blocks: 3,
            ..NetConfig::default()
        },
        train: TrainConfig {
            lr0: 0.005,
            iters_per_recursion: 300,
            ..TrainConfig::default()
        },
        crf_grid: product_grid(&[0.0, 0.02, 0.05, 0.1], &[0.0, 0.1], &[2.0], &[0.1], &[5.0], &CrfParams::cardiac()),
        ..PipelineConfig::default()
    }
}

fn avg(scores: &[Vec<f64>]) -> f64 {
    scores.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).sum::<f64>() / scores.len() as f64
}

/// Seed conservation in every E step and the warm-start hash chain.
fn invariants(res: &PipelineResult, init: &RecursionState, max_recursions: usize) -> Result<(), String> {
    for (r, targets) in res.target_history.iter().enumerate() {
        for (i, (t, z)) in targets.iter().zip(&init.seeds).enumerate() {
            if t.data().iter().zip(z.data()).any(|(&a, &b)| b != UNKNOWN && a != b) {
                return Err(format!("{}: recursion {} image {i} lost a seed", res.variant, r + 1));
            }
        }
    }
    let records = &res.state.records;
    for k in 1..records.len() {
        if records[k].recursion != records[k - 1].recursion + 1 || records[k].hash_in != records[k - 1].hash_out {
            return Err(format!("{}: warm start broken at recursion {}", res.variant, records[k].recursion));
        }
    }
    if records[0].hash_out != net_hash(&init.net) || res.state.recursion > max_recursions {
        return Err(format!("{}: bad recursion bookkeeping", res.variant));
    }
    Ok(())
}

struct SeedResult {
    bnr: f64,
    base: f64,
    fully: f64,
    weak: Vec<(Variant, f64)>,
    reports: Vec<DiceReport>,
    problems: Vec<String>,
}

fn run_seed(seed: u64) -> Result<SeedResult, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    synth_dataset(dir.path(), &SynthConfig { seed, ..SynthConfig::default() }).map_err(|e| e.to_string())?;
    let ds = Dataset::load(&dir.path().join("manifest.csv")).map_err(|e| e.to_string())?;
    let cfg = bench_config(seed);
    let score = |state: &RecursionState| emdriver::evaluate(&state.net, state.rnn.as_ref(), &ds.test, ds.num_labels);
    let mut out = SeedResult {
        bnr: 0.0,
        base: 0.0,
        fully: 0.0,
        weak: Vec::new(),
        reports: Vec::new(),
        problems: Vec::new(),
    };
    let push = |out: &mut SeedResult, v: Variant, s: Vec<Vec<f64>>| -> f64 {
        let a = avg(&s);
        out.reports.push(DiceReport::new(v, s, ds.num_labels).expect("valid Dice"));
        a
    };

    let init = emdriver::initial_state(&ds, &PipelineConfig { variant: Variant::BaseNoRecursion, ..cfg.clone() }, None)
        .map_err(|e| e.to_string())?;
    let bnr_scores = score(&init).map_err(|e| e.to_string())?;
    out.bnr = push(&mut out, Variant::BaseNoRecursion, bnr_scores.clone());

    let base_cfg = PipelineConfig { variant: Variant::Base, ..cfg.clone() };
    let base = emdriver::continue_from(&ds, &base_cfg, init.clone(), None).map_err(|e| e.to_string())?;
    if let Err(p) = invariants(&base, &init, cfg.max_recursions) {
        out.problems.push(p);
    }
    let base_scores = score(&base.state).map_err(|e| e.to_string())?;
    out.base = push(&mut out, Variant::Base, base_scores.clone());

    // reproducibility: the no-recursion and recursive baselines again from scratch
    let again = emdriver::run_pipeline(&ds, &base_cfg, None).map_err(|e| e.to_string())?;
    let again_scores = score(&again.state).map_err(|e| e.to_string())?;
    let again_bnr = emdriver::initial_state(&ds, &PipelineConfig { variant: Variant::BaseNoRecursion, ..cfg.clone() }, None)
        .map_err(|e| e.to_string())?;
    let same = |a: &[Vec<f64>], b: &[Vec<f64>]| a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| (x - y).abs() <= 1e-12);
    if !same(&again_scores, &base_scores)
        || net_hash(&again.state.net) != net_hash(&base.state.net)
        || !same(&score(&again_bnr).map_err(|e| e.to_string())?, &bnr_scores)
    {
        out.problems.push(format!("seed {seed}: rerun differs"));
    }

    for v in WEAK {
        let res = emdriver::continue_from(&ds, &PipelineConfig { variant: v, ..cfg.clone() }, init.clone(), None)
            .map_err(|e| e.to_string())?;
        if let Err(p) = invariants(&res, &init, cfg.max_recursions) {
            out.problems.push(p);
        }
        let s = score(&res.state).map_err(|e| e.to_string())?;
        let a = push(&mut out, v, s);
        out.weak.push((v, a));
    }

    let fully = emdriver::fully_supervised(&ds, &PipelineConfig { variant: Variant::FullySupervised, ..cfg.clone() }, None)
        .map_err(|e| e.to_string())?;
    let fully_scores = score(&fully.state).map_err(|e| e.to_string())?;
    out.fully = push(&mut out, Variant::FullySupervised, fully_scores);
    Ok(out)
}

pub fn trend_reproduction() -> Outcome {
    let mut results = Vec::new();
    for seed in SEEDS {
        let start = Instant::now();
        match run_seed(seed) {
            Ok(r) => {
                let weak: Vec<String> = r.weak.iter().map(|(v, a)| format!("{v} {a:.4}")).collect();
                println!(
                    "  seed {seed}: no recursion {:.4}, base {:.4}, {}, fully supervised {:.4} [{:.0}s]",
                    r.bnr,
                    r.base,
                    weak.join(", "),
                    r.fully,
                    start.elapsed().as_secs_f64()
                );
                results.push(r);
            }
            Err(e) => return Outcome::new(false, format!("seed {seed} failed: {e}")),
        }
    }
    let reports: Vec<DiceReport> = results.iter().flat_map(|r| r.reports.iter().cloned()).collect();
    for line in Table::build(&reports).expect("reports").to_text().lines() {
        println!("  {line}");
    }

    let fully_mean = results.iter().map(|r| r.fully).sum::<f64>() / results.len() as f64;
    let a = fully_mean >= 0.95;
    let b = results.iter().filter(|r| r.base > r.bnr).count();
    let c = results
        .iter()
        .filter(|r| {
            let best = r.weak.iter().map(|w| w.1).fold(f64::MIN, f64::max);
            best >= 0.92 * r.fully
        })
        .count();
    let problems: Vec<String> = results.iter().flat_map(|r| r.problems.iter().cloned()).collect();
    let d = problems.is_empty();
    let mut detail = format!(
        "(a) fully supervised {fully_mean:.4} {}, (b) base > no recursion on {b}/3 seeds {}, (c) weak within 8% on {c}/3 seeds {}, (d) invariants {}",
        mark(a),
        mark(b == 3),
        mark(c >= 2),
        mark(d)
    );
    if !d {
        detail.push_str(&format!(": {}", problems.join("; ")));
    }
    Outcome::new(a && b == 3 && c >= 2 && d, detail)
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAILED"
    }
}
