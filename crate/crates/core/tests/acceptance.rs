//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::ops::ControlFlow;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mff_seld::config::{Config, MffConfig, PitMode};
use mff_seld::dataset::{synthesize, Dataset};
use mff_seld::features::{mean_iv_direction, FeatureExtractor};
use mff_seld::labels::{angular_distance, azel_to_vec};
use mff_seld::metrics::assign::{exhaustive_min_cost, hungarian, total_cost};
use mff_seld::metrics::{evaluate_files, seld_score, MetricsConfig};
use mff_seld::network::{count_params, param_breakdown, Einv2};
use mff_seld::probe::{mff_ladder, tfcm_time_support};
use mff_seld::synth::{mix_scene, SignalKind, SourceSpec, CLASSES};
use mff_seld::training::pit::{permutations, pit_loss, LossWeights, Targets};
use mff_seld::training::Trainer;
use mff_seld::verify::full_suite;
use mff_tensor::nn::Ctx;
use mff_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Reference (ER, F, LE, LR, SELD) rows of the model comparison.
const REFERENCE_ROWS: [(&str, f64, f64, f64, f64, f64); 9] = [
    ("STARSS22 2022 baseline", 0.72, 24.0, 26.6, 49.0, 0.5345),
    ("STARSS22 ResNet-Conformer", 0.71, 31.0, 22.3, 64.0, 0.4710),
    ("STARSS22 CST-former", 0.59, 42.6, 20.5, 61.3, 0.4162),
    ("STARSS22 EINV2", 0.75, 32.3, 24.0, 56.1, 0.5000),
    ("STARSS22 MFF-EINV2", 0.61, 41.7, 20.3, 66.9, 0.4089),
    ("STARSS23 2023 baseline", 0.57, 29.9, 22.0, 47.7, 0.4791),
    ("STARSS23 DST attention", 0.58, 39.5, 20.0, 55.8, 0.4345),
    ("STARSS23 CST-former", 0.56, 42.7, 17.9, 62.0, 0.4019),
    ("STARSS23 MFF-EINV2", 0.54, 42.5, 18.7, 62.6, 0.3980),
];

fn a1_score_arithmetic() -> Check {
    let mut worst: f64 = 0.0;
    for (name, er, f, le, lr, want) in REFERENCE_ROWS {
        let got = seld_score(er, f, le, lr);
        let d = (got - want).abs();
        worst = worst.max(d);
        ensure(d <= 0.005, || format!("{name}: {got:.4} vs {want:.4}"))?;
    }
    Ok(format!("9 rows, max |diff| {worst:.5} (tol 0.005)"))
}

fn a2_dimension_ladder() -> Check {
    let c = 64;
    let cfg = MffConfig {
        s: 3,
        m: 3,
        base_channels: c,
    };
    let (out, trace) = mff_ladder(&cfg, [1, c, 400, 128]).map_err(err)?;
    let deepest = trace.last().ok_or("no stages")?;
    let want = [vec![1, c, 400, 128], vec![1, 2 * c, 400, 32], vec![1, 4 * c, 400, 8]];
    ensure(*deepest == want, || format!("subnetworks {deepest:?}"))?;
    ensure(out == [1, c, 400, 128], || format!("output {out:?}"))?;
    let c = 4;
    let mut cases = 0;
    for s in 0..=4 {
        for m in 3..=7 {
            let cfg = MffConfig { s, m, base_channels: c };
            let (out, trace) = mff_ladder(&cfg, [2, c, 8, 128]).map_err(err)?;
            ensure(out == [2, c, 8, 128], || format!("s={s} m={m}: {out:?}"))?;
            ensure(trace.iter().flatten().all(|sh| sh[2] == 8), || {
                format!("s={s} m={m}: time changed")
            })?;
            cases += 1;
        }
    }
    Ok(format!(
        "[1,64,400,128]: F 128->32->8, C 64->128->256; shape kept for {cases} (s, m) pairs at C={c}"
    ))
}

fn a3_gradient_suite() -> Check {
    let results = full_suite(Some(16)).map_err(err)?;
    let worst = results
        .iter()
        .max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err))
        .ok_or("empty suite")?;
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.report.passed())
        .map(|r| r.name.as_str())
        .collect();
    ensure(failed.is_empty(), || format!("failed: {}", failed.join(", ")))?;
    let points: usize = results.iter().map(|r| r.report.checked).sum();
    Ok(format!(
        "{} checks, {points} points, max rel err {:.2e} ({}), tol 1e-4",
        results.len(),
        worst.report.max_rel_err,
        worst.name
    ))
}

fn a4_receptive_field() -> Check {
    let support = tfcm_time_support(6, 2, 300, 150).map_err(err)?;
    let want = 1 + 2 * ((1 << 6) - 1);
    ensure(support.len() == want, || {
        format!("support {} frames, expected {want}", support.len())
    })?;
    let contiguous = support.windows(2).all(|w| w[1] == w[0] + 1);
    ensure(contiguous && support[0] == 150 - 63, || {
        "support is not centred and contiguous".into()
    })?;
    for frame in [0, 40, 299] {
        let s = tfcm_time_support(6, 2, 300, frame).map_err(err)?;
        ensure(s.len() <= want, || format!("frame {frame}: {} frames", s.len()))?;
    }
    Ok(format!(
        "m=6 support {} frames ({}..={})",
        support.len(),
        support[0],
        support[support.len() - 1]
    ))
}

fn a5_end_to_end_shapes() -> Check {
    let cfg = Config::desk();
    let (net, store) = Einv2::init::<f32>(&cfg, 1).map_err(err)?;
    let ctx = Ctx::new(&store, false, false, 0);
    let g = ctx.graph();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = g.input(Tensor::randn(&[2, 7, 400, 128], 1.0, &mut rng));
    let out = net.forward(&ctx, x).map_err(err)?;
    let (sed, doa) = (g.shape(out.sed), g.shape(out.doa));
    ensure(sed == [2, 50, 3, 14], || format!("sed {sed:?}"))?;
    ensure(doa == [2, 50, 3, 3], || format!("doa {doa:?}"))?;
    let hop = cfg.data.clip_seconds / cfg.label_frames() as f64;
    ensure((hop - 0.1).abs() < 1e-12, || format!("label hop {hop} s"))?;
    Ok(format!(
        "[2,7,400,128] -> sed {sed:?}, doa {doa:?}; {} label frames of {hop} s",
        cfg.label_frames()
    ))
}

fn a6_iv_recovery() -> Check {
    let cfg = Config::default();
    let fx = FeatureExtractor::new(&cfg.data).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let src = SourceSpec {
            class: rng.random_range(0..CLASSES),
            azimuth_deg: rng.random_range(-180.0..180.0),
            elevation_deg: rng.random_range(-85.0..85.0),
            onset: rng.random_range(0.0..2.0),
            offset: rng.random_range(3.0..5.0),
            kind: if rng.random_bool(0.5) {
                SignalKind::Tone
            } else {
                SignalKind::Noise
            },
            gain: rng.random_range(0.1..0.9),
        };
        let (clip, _) = mix_scene(
            std::slice::from_ref(&src),
            cfg.data.sample_rate,
            cfg.data.clip_seconds,
            cfg.data.label_hop_seconds,
            i,
        )
        .map_err(err)?;
        let f = fx.extract(&clip).map_err(err)?;
        let dir = mean_iv_direction(&f[0]).ok_or_else(|| format!("clip {i} is silent"))?;
        let truth = azel_to_vec(src.azimuth_deg, src.elevation_deg).map_err(err)?;
        let e = angular_distance(dir, truth).map_err(err)?;
        worst = worst.max(e);
        ensure(e <= 1.0, || {
            format!(
                "clip {i} at ({:.1}, {:.1}): {e:.3} deg",
                src.azimuth_deg, src.elevation_deg
            )
        })?;
    }
    Ok(format!("100 clips, max error {worst:.2e} deg (tol 1 deg)"))
}

fn a8_pit_invariance() -> Check {
    let (classes, frames) = (13, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = LossWeights { sed: 0.8, doa: 0.2 };
    let perms = permutations(3);
    let mut cases = 0;
    for _ in 0..200 {
        let logits: Vec<f64> = (0..frames * 3 * (classes + 1))
            .map(|_| rng.random_range(-5.0..5.0))
            .collect();
        let doa: Vec<f64> = (0..frames * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut class = Vec::new();
        let mut dirs = Vec::new();
        for _ in 0..frames * 3 {
            if rng.random_bool(0.6) {
                class.push(rng.random_range(0..classes));
                let d = azel_to_vec(rng.random_range(-180.0..180.0), rng.random_range(-90.0..90.0)).map_err(err)?;
                dirs.push(d);
            } else {
                class.push(classes);
                dirs.push([0.0; 3]);
            }
        }
        let tgt = Targets {
            batch: 1,
            frames,
            tracks: 3,
            classes,
            class,
            doa: dirs,
        };
        let loss = |t: &Targets, mode| -> Result<f64, String> {
            let g = Graph::<f64>::new();
            let s = g.constant(Tensor::new(&[1, frames, 3, classes + 1], logits.clone()).map_err(err)?);
            let d = g.constant(Tensor::new(&[1, frames, 3, 3], doa.clone()).map_err(err)?);
            let out = pit_loss(&g, s, d, t, w, mode).map_err(err)?;
            Ok(g.value(out.loss).item())
        };
        let base = loss(&tgt, PitMode::Frame)?;
        for p in &perms {
            let mut t2 = tgt.clone();
            for f in 0..frames {
                for k in 0..3 {
                    t2.class[f * 3 + k] = tgt.class[f * 3 + p[k]];
                    t2.doa[f * 3 + k] = tgt.doa[f * 3 + p[k]];
                }
            }
            let other = loss(&t2, PitMode::Frame)?;
            ensure(other.to_bits() == base.to_bits(), || {
                format!("perm {p:?}: {other:e} vs {base:e}")
            })?;
        }
        let mut oracle = 0.0;
        for f in 0..frames {
            let mut best = f64::INFINITY;
            for p in &perms {
                let mut c = 0.0;
                for t in 0..3 {
                    let o = f * 3 + t;
                    let q = f * 3 + p[t];
                    let row = &logits[o * (classes + 1)..(o + 1) * (classes + 1)];
                    let z: f64 = row.iter().map(|v| v.exp()).sum();
                    c += w.sed * -(row[tgt.class[q]].exp() / z).ln() / 3.0;
                    if tgt.class[q] < classes {
                        let se: f64 = (0..3).map(|j| (doa[o * 3 + j] - tgt.doa[q][j]).powi(2)).sum();
                        c += w.doa * se / 9.0;
                    }
                }
                best = best.min(c);
            }
            oracle += best / frames as f64;
        }
        ensure((oracle - base).abs() <= 1e-10, || format!("oracle {oracle} vs {base}"))?;
        cases += 1;
    }
    Ok(format!(
        "{cases} random problems: bit-exact under all 6 target orders, oracle within 1e-10"
    ))
}

fn a9_parameter_count() -> Check {
    let cfg = Config::default();
    let (_, store) = Einv2::init::<f32>(&cfg, 0).map_err(err)?;
    let total = count_params(&store);
    let target = 26.9e6;
    let rel = (total as f64 - target) / target;
    let parts: Vec<String> = param_breakdown(&store)
        .iter()
        .map(|(k, n)| format!("{k} {n}"))
        .collect();
    println!("    parameter breakdown: {}", parts.join(", "));
    ensure(rel.abs() <= 0.15, || {
        format!("{total} params, {:+.1}% from 26.9M", rel * 100.0)
    })?;
    Ok(format!("{total} params, {:+.2}% from 26.9M (tol 15%)", rel * 100.0))
}

fn a10_metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..1000 {
        let (n, m) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let mut dir = || azel_to_vec(rng.random_range(-180.0..180.0), rng.random_range(-90.0..90.0));
        let refs: Vec<[f64; 3]> = (0..n).map(|_| dir()).collect::<Result<_, _>>().map_err(err)?;
        let preds: Vec<[f64; 3]> = (0..m).map(|_| dir()).collect::<Result<_, _>>().map_err(err)?;
        let cost: Vec<Vec<f64>> = refs
            .iter()
            .map(|&r| preds.iter().map(|&p| angular_distance(r, p)).collect::<Result<_, _>>())
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let h = total_cost(&cost, &hungarian(&cost));
        let e = exhaustive_min_cost(&cost);
        ensure((h - e).abs() <= 1e-9, || {
            format!("case {case}: hungarian {h} vs exhaustive {e}")
        })?;
    }
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let cfg = MetricsConfig {
        classes: 2,
        ..MetricsConfig::default()
    };
    let r = evaluate_files(&dir.join("metrics_pred.csv"), &dir.join("metrics_ref.csv"), cfg).map_err(err)?;
    let want = (5.0 / 6.0, 50.0, 7.5, 62.5);
    ensure(r.er == want.0 && r.f == want.1 && r.lr == want.3, || {
        format!("fixture ER {} F {} LR {}", r.er, r.f, r.lr)
    })?;
    ensure((r.le - want.2).abs() <= 1e-9, || format!("fixture LE {}", r.le))?;
    Ok(format!(
        "1000 segments match exhaustive search; fixture ER {:.4} F {:.1} LE {:.4} LR {:.1}",
        r.er, r.f, r.le, r.lr
    ))
}

/// Desk-scale configuration used for the overfit run.
fn overfit_config() -> Config {
    let mut cfg = Config::desk();
    cfg.train.epochs = 200;
    cfg.train.batch_size = 2;
    cfg.train.lr = 1e-3;
    cfg.train.lr_drop = 3e-4;
    cfg.train.lr_drop_epoch = 40;
    cfg.model.dropout = 0.0;
    cfg.train.eval_every = 5;
    cfg.train.seed = 7;
    cfg
}

fn a7_overfit() -> Check {
    const LIMIT: Duration = Duration::from_secs(30 * 60);
    let start = Instant::now();
    let cfg = overfit_config();
    let dir = std::env::temp_dir().join(format!("mff-seld-overfit-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    synthesize(&dir, 20, 7, &cfg).map_err(err)?;
    let data = Dataset::load(&dir, &cfg, None).map_err(err)?;
    let _ = std::fs::remove_dir_all(&dir);
    let mut trainer = Trainer::<f32>::new(&cfg).map_err(err)?;
    let mut reached = None;
    let mut last = (0.0, 180.0);
    let history = trainer
        .fit(&data, None, &mut std::io::sink(), None, &mut |rec| {
            if let Some(r) = &rec.val {
                println!(
                    "    epoch {:>3}  loss {:.4}  train F {:.1}  LE {:.2}  ({:.0} s)",
                    rec.epoch,
                    rec.train_loss,
                    r.f,
                    r.le,
                    start.elapsed().as_secs_f64()
                );
                last = (r.f, r.le);
                if r.f >= 90.0 && r.le <= 10.0 {
                    reached = Some(rec.epoch + 1);
                    return ControlFlow::Break(());
                }
            }
            if start.elapsed() > LIMIT {
                return ControlFlow::Break(());
            }
            ControlFlow::Continue(())
        })
        .map_err(err)?;
    let elapsed = start.elapsed();
    let summary = format!(
        "{} epochs, train F {:.1} (>= 90), LE {:.2} (<= 10), {:.1} min (< 30)",
        history.len(),
        last.0,
        last.1,
        elapsed.as_secs_f64() / 60.0
    );
    ensure(reached.is_some() && elapsed < LIMIT, || summary.clone())?;
    Ok(summary)
}

fn main() -> ExitCode {
    let criteria: [(&str, &str, fn() -> Check); 10] = [
        ("A1", "score arithmetic", a1_score_arithmetic),
        ("A2", "dimension ladder", a2_dimension_ladder),
        ("A3", "gradient suite", a3_gradient_suite),
        ("A4", "temporal receptive field", a4_receptive_field),
        ("A5", "end-to-end shapes", a5_end_to_end_shapes),
        ("A6", "intensity-vector direction", a6_iv_recovery),
        ("A8", "PIT invariance", a8_pit_invariance),
        ("A9", "parameter count", a9_parameter_count),
        ("A10", "metric oracle", a10_metric_oracle),
        ("A7", "desk-scale overfit", a7_overfit),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f.eq_ignore_ascii_case(id)) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id:<4} PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("{id:<4} FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
