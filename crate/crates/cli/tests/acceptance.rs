//! Acceptance criteria. Runs every criterion, prints one PASS/FAIL line
//! each, and exits non-zero if any fails.

use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swa_cli::RunReport;
use swa_core::attention::{build_swa_mask, full_pair_count, gqa_attend, score_pair_count};
use swa_core::model::Decoder;
use swa_core::oracle::{self, OracleMask};
use swa_core::verify::random_tokens;
use swa_core::{DecoderWeights, GenerationSession, HeadGrouping, ModelConfig, RollingKvCache, Tensor};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn toy() -> ModelConfig {
    ModelConfig::toy()
}

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn decode_logits(weights: &Arc<DecoderWeights>, tokens: &[usize]) -> Result<Vec<Vec<f32>>, String> {
    let mut session = GenerationSession::new(Arc::clone(weights));
    tokens
        .iter()
        .map(|&t| {
            session
                .forward_decode(t)
                .map(Tensor::into_data)
                .map_err(|e| e.to_string())
        })
        .collect()
}

fn ac1_oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let weights = Arc::new(DecoderWeights::init_random(&toy(), 42).map_err(|e| e.to_string())?);
    let tokens = random_tokens(256, 64, 42);
    let engine = decode_logits(&weights, &tokens)?;
    let oracle = oracle::oracle_forward_swa(&weights, &tokens).map_err(|e| e.to_string())?;
    let worst = engine
        .iter()
        .enumerate()
        .map(|(i, row)| max_abs(row, oracle.row(i)))
        .fold(0.0f32, f32::max);
    let elapsed = started.elapsed();
    ensure(worst <= 1e-5, format!("max-abs error {worst:e} > 1e-5"))?;
    ensure(
        elapsed < Duration::from_secs(10),
        format!("took {elapsed:?}, limit 10 s"),
    )?;
    Ok(format!("64 steps, max-abs error {worst:e}, {elapsed:.2?}"))
}

fn ac2_vanilla_degeneracy() -> Outcome {
    let weights = Arc::new(DecoderWeights::init_random(&toy(), 42).map_err(|e| e.to_string())?);
    let tokens = random_tokens(256, 8, 2);
    let engine = decode_logits(&weights, &tokens)?;
    let causal = oracle::oracle_forward_causal(&weights, &tokens).map_err(|e| e.to_string())?;
    let worst = engine
        .iter()
        .enumerate()
        .map(|(i, row)| max_abs(row, causal.row(i)))
        .fold(0.0f32, f32::max);
    ensure(worst <= 1e-5, format!("max-abs error {worst:e} > 1e-5"))?;
    Ok(format!("8 tokens, max-abs error vs causal {worst:e}"))
}

fn ac3_chunked_prefill() -> Outcome {
    let weights = Arc::new(DecoderWeights::init_random(&toy(), 42).map_err(|e| e.to_string())?);
    let mut worst = 0.0f32;
    for len in [1usize, 7, 8, 9, 24, 26] {
        let prompt = random_tokens(256, len, 300 + len as u64);
        let mut chunked = GenerationSession::new(Arc::clone(&weights));
        let got = chunked.prefill(&prompt).map_err(|e| e.to_string())?;
        let mut stepped = GenerationSession::new(Arc::clone(&weights));
        let mut last = None;
        for &t in &prompt {
            last = Some(stepped.forward_decode(t).map_err(|e| e.to_string())?);
        }
        let err = max_abs(got.data(), last.unwrap().data());
        worst = worst.max(err);
        ensure(err <= 1e-6, format!("len {len}: error {err:e} > 1e-6"))?;
        for (a, b) in chunked.caches().iter().zip(stepped.caches()) {
            ensure(
                a.retained_positions() == b.retained_positions(),
                format!("len {len}: retained positions differ"),
            )?;
        }
    }
    Ok(format!("lengths 1,7,8,9,24,26, max-abs error {worst:e}"))
}

fn ac4_cache_bound() -> Outcome {
    let weights = Arc::new(DecoderWeights::init_random(&toy(), 42).map_err(|e| e.to_string())?);
    let tokens = random_tokens(256, 64, 4);
    let mut session = GenerationSession::new(Arc::clone(&weights));
    let mut bytes_after_w = 0;
    for (i, &t) in tokens.iter().enumerate() {
        session.forward_decode(t).map_err(|e| e.to_string())?;
        if i + 1 == 8 {
            bytes_after_w = session.total_cache_bytes();
        }
    }
    for cache in session.caches() {
        ensure(cache.filled() == 8, format!("cache holds {} entries", cache.filled()))?;
        ensure(cache.window_view().map_err(|e| e.to_string())?.positions.len() == 8, "view size")?;
    }
    ensure(session.total_cache_bytes() == bytes_after_w, "cache bytes grew after W tokens")?;
    let (_, history) = oracle::forward_with_history(&weights, &tokens, OracleMask::SlidingWindow)
        .map_err(|e| e.to_string())?;
    ensure(history.entries_per_layer() == 64, "oracle history is not 64 entries")?;
    let ratio = history.entries_per_layer() as f64 / session.caches()[0].filled() as f64;
    ensure(ratio == 8.0, format!("ratio {ratio}"))?;
    ensure(
        toy().cache_memory_ratio(64) == 8.0 && ModelConfig::seven_b().cache_memory_ratio(32768) == 8.0,
        "cache_memory_ratio",
    )?;
    Ok(format!("rolling 8 entries/layer vs unbounded 64, ratio {ratio} (32768/4096 = 8.0)"))
}

fn ac5_receptive_field() -> Outcome {
    let cfg = ModelConfig {
        n_layers: 2,
        window_size: 4,
        ..toy()
    };
    let weights = DecoderWeights::init_random(&cfg, 42).map_err(|e| e.to_string())?;
    let tokens = random_tokens(256, 12, 5);
    let affected = oracle::reach_probe(&weights, &tokens, 0, 1e-2).map_err(|e| e.to_string())?;
    ensure(
        affected == (0..=6).collect::<Vec<_>>(),
        format!("affected {affected:?}, expected 0..=6"),
    )?;
    Ok("perturbing position 0 affects exactly 0..=6, not 7".into())
}

fn ac6_operation_count() -> Outcome {
    let full = full_pair_count(16384);
    let swa = score_pair_count(16384, 4096);
    ensure(full == 134_225_920, format!("full {full}"))?;
    ensure(swa == 58_722_304, format!("windowed {swa}"))?;
    let ratio = full as f64 / swa as f64;
    ensure(ratio >= 2.0, format!("ratio {ratio}"))?;
    for len in 1..=64usize {
        let pos: Vec<usize> = (0..len).collect();
        ensure(
            build_swa_mask(&pos, &pos, len).pair_count() == full_pair_count(len as u64),
            format!("full count L={len}"),
        )?;
        for w in 1..=16usize {
            let enumerated = build_swa_mask(&pos, &pos, w).pair_count();
            ensure(
                enumerated == score_pair_count(len as u64, w as u64),
                format!("L={len} W={w}: enumerated {enumerated}"),
            )?;
        }
    }
    Ok(format!("{full} vs {swa} pairs, ratio {ratio:.4}; enumeration matches for L<=64, W<=16"))
}

fn ac7_gqa_degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (heads, n, d) = (2usize, 5usize, 16usize);
    let mut random = |shape: Vec<usize>| {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    };
    let q = random(vec![heads, n, d]);
    let k = random(vec![heads, n, d]);
    let v = random(vec![heads, n, d]);
    let pos: Vec<usize> = (0..n).collect();
    let mask = build_swa_mask(&pos, &pos, n);
    let got = gqa_attend(&q, &k, &v, &mask, &HeadGrouping::new(heads, heads).unwrap())
        .map_err(|e| e.to_string())?;

    // plain multi-head attention in f64
    let at = |t: &Tensor, h: usize, i: usize, c: usize| t.data()[(h * n + i) * d + c] as f64;
    let mut worst = 0.0f64;
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..=i)
                .map(|j| (0..d).map(|c| at(&q, h, i, c) * at(&k, h, j, c)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for c in 0..d {
                let expected: f64 = (0..=i).map(|j| (scores[j] - m).exp() / z * at(&v, h, j, c)).sum();
                worst = worst.max((got.data()[(h * n + i) * d + c] as f64 - expected).abs());
            }
        }
    }
    ensure(worst <= 1e-6, format!("max-abs error {worst:e} > 1e-6"))?;
    Ok(format!("2 heads, 5 tokens, max-abs error {worst:e}"))
}

fn ac8_parameter_count() -> Outcome {
    let n = ModelConfig::seven_b().parameter_count();
    ensure(n == 7_241_732_096, format!("7B count {n}"))?;
    ensure((7.0e9..=7.5e9).contains(&(n as f64)), "outside [7.0e9, 7.5e9]")?;

    let cfg = toy();
    let weights = DecoderWeights::init_random(&cfg, 42).map_err(|e| e.to_string())?;
    let allocated: u64 = weights.tensors().iter().map(|t| t.len() as u64).sum();
    // 2·256·64 + 4·(2·64 + 64·64 + 2·64·32 + 64·64 + 3·64·128) + 64
    ensure(allocated == 180_800, format!("toy allocation {allocated}"))?;
    ensure(cfg.parameter_count() == allocated, "formula differs from allocation")?;
    Ok(format!("7B config: {n}; toy: {allocated} allocated == formula"))
}

fn ac9_rolling_slot_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n_kv, hd) = (2usize, 4usize);
    for case in 0..200 {
        let w = [1usize, 2, 3, 4, 8][rng.random_range(0..5)];
        let len = rng.random_range(1..=200usize);
        let mut cache = RollingKvCache::with_dims(w, n_kv, hd);
        let mut log: Vec<(usize, Vec<f32>, Vec<f32>)> = Vec::new();
        for p in 0..len {
            let k: Vec<f32> = (0..n_kv * hd).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f32> = (0..n_kv * hd).map(|_| rng.random_range(-1.0..1.0)).collect();
            cache
                .append(
                    p,
                    &Tensor::new(vec![n_kv, hd], k.clone()).unwrap(),
                    &Tensor::new(vec![n_kv, hd], v.clone()).unwrap(),
                )
                .map_err(|e| e.to_string())?;
            log.push((p, k, v));
        }
        let view = cache.window_view().map_err(|e| e.to_string())?;
        let tail = &log[len - len.min(w)..];
        ensure(view.positions.len() == tail.len(), format!("case {case}: length"))?;
        for (i, expected) in tail.iter().enumerate() {
            ensure(view.entry(i) == *expected, format!("case {case}: entry {i}"))?;
        }
    }
    Ok("200 random append sequences match the unbounded log tail".into())
}

fn run_generate(args: &[&str]) -> Result<(String, RunReport), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_swa"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.code() == Some(0), format!("exit {:?}", out.status.code()))?;
    let stderr = String::from_utf8(out.stderr).map_err(|e| e.to_string())?;
    let report: RunReport = serde_json::from_str(stderr.lines().last().unwrap_or(""))
        .map_err(|e| format!("report: {e}"))?;
    Ok((String::from_utf8(out.stdout).map_err(|e| e.to_string())?, report))
}

fn ac10_determinism() -> Outcome {
    let dir = std::env::temp_dir().join(format!("swa-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let config = dir.join("toy.json");
    std::fs::write(&config, toy().to_json()).map_err(|e| e.to_string())?;
    let config = config.to_str().unwrap();
    let args = [
        "generate", "--random-init", "--seed", "42", "--config", config,
        "--prompt-ids", "1 2 3", "--max-tokens", "8", "--greedy",
    ];
    let (out_a, mut rep_a) = run_generate(&args)?;
    let (out_b, mut rep_b) = run_generate(&args)?;
    let _ = std::fs::remove_dir_all(&dir);

    ensure(out_a == out_b, "stdout differs between runs")?;
    ensure(out_a.split_whitespace().count() == 8, format!("stdout {out_a:?}"))?;
    for r in [&mut rep_a, &mut rep_b] {
        r.wall_time = 0.0;
        r.tokens_per_second = 0.0;
    }
    ensure(rep_a == rep_b, "reports differ")?;
    Ok(format!("stdout `{}` identical across runs", out_a.trim()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("AC1 oracle equivalence", ac1_oracle_equivalence),
        ("AC2 vanilla degeneracy", ac2_vanilla_degeneracy),
        ("AC3 chunked pre-fill", ac3_chunked_prefill),
        ("AC4 cache bound", ac4_cache_bound),
        ("AC5 receptive field", ac5_receptive_field),
        ("AC6 operation-count ratio", ac6_operation_count),
        ("AC7 GQA degeneracy", ac7_gqa_degeneracy),
        ("AC8 parameter count", ac8_parameter_count),
        ("AC9 rolling-slot law", ac9_rolling_slot_law),
        ("AC10 determinism", ac10_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
