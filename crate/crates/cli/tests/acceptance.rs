// SPDX-License-Identifier: Apache-2.0

//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails.

use std::net::TcpStream;
use std::process::Command;
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use rand::Rng;
use snd_core::denoiser::{batch_loss, DenoiserConfig, DenoiserWeights, TrainingBatch, TrainingExample};
use snd_core::eval::{inversion_attack, knn_entropy, mi_estimate, vocab_knn_distance};
use snd_core::gradcheck::grad_check;
use snd_core::harness::pipeline::{downstream_comparison, partition_plan, train_for};
use snd_core::harness::scenarios::{clipping_arm, drill_cell, mi_cell, server_ablation_cell};
use snd_core::harness::world::{denoise_quality, denoiser_config};
use snd_core::harness::{ExperimentConfig, World};
use snd_core::model::{embed_tokens, encode, init_toy_model, EmbeddingRole, EncoderConfig, SentenceEmbedding};
use snd_core::privacy::{
    clip_privatized, log_density_ratio, privatize, sample_noise, server_mse_lower_bound, ClipBound, Eta,
};
use snd_core::protocol::{
    bind, client_request, decode_frame, duplex, encode_frame, frame::frame_len, handle_request, serve_connection,
    serve_tcp, Frame, Metered, MsgType, Session,
};
use snd_core::{RngState, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Check = fn(&World) -> Outcome;

fn noise_law(_: &World) -> Outcome {
    let start = Instant::now();
    let mut rng = RngState::new(1);
    let n = 200_000;
    let radii: Vec<f64> = (0..n).map(|_| sample_noise(16, 2.0, &mut rng).unwrap().radius).collect();
    let mean = radii.iter().sum::<f64>() / n as f64;
    let var = radii.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let secs = start.elapsed().as_secs_f64();
    let pass = (mean - 8.0).abs() <= 0.08 && (var - 4.0).abs() <= 0.12 && secs < 10.0;
    outcome(pass, format!("mean |z| {mean:.4} (8.0), var {var:.4} (4.0), {secs:.2}s"))
}

fn laplace_tail(_: &World) -> Outcome {
    let mut rng = RngState::new(2);
    let n = 100_000;
    let zs: Vec<f64> = (0..n).map(|_| sample_noise(1, 1.0, &mut rng).unwrap().z[0].abs()).collect();
    let mut worst = 0.0f64;
    for t in [0.5, 1.0, 2.0] {
        let p = zs.iter().filter(|&&z| z > t).count() as f64 / n as f64;
        worst = worst.max((p - (-t).exp()).abs());
    }
    outcome(worst < 0.01, format!("max tail gap {worst:.5}"))
}

fn ratio_property(_: &World) -> Outcome {
    let mut rng = RngState::new(3);
    let eta = 3.0;
    let mut violations = 0;
    for _ in 0..10_000 {
        let x = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let xp = Tensor::randn(&[8], 1.0, &mut rng).into_data();
        let (y, _) = privatize(&x, Eta::Finite(eta), &mut rng).unwrap();
        let dist = x.row(0).iter().zip(&xp).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if log_density_ratio(x.row(0), &xp, y.row(0), eta) > eta * dist + 1e-9 {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("{violations} violations in 10000 triples"))
}

fn clipping(_: &World) -> Outcome {
    let mut rng = RngState::new(4);
    let bound = ClipBound::new(1.7).unwrap();
    let mut ok = true;
    let mut worst_dir = 0.0f64;
    for _ in 0..200 {
        let m = Tensor::randn(&[16, 8], rng.gen_range(0.1..3.0), &mut rng);
        let c = clip_privatized(&m, bound);
        ok &= clip_privatized(&c, bound) == c;
        for i in 0..m.rows() {
            let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let (nm, nc) = (norm(m.row(i)), norm(c.row(i)));
            ok &= nc <= bound.value();
            for (a, b) in m.row(i).iter().zip(c.row(i)) {
                worst_dir = worst_dir.max((a / nm - b / nc).abs());
            }
        }
    }
    outcome(ok && worst_dir <= 1e-12, format!("idempotent and bounded: {ok}, direction error {worst_dir:.2e}"))
}

fn entropy_oracles(_: &World) -> Outcome {
    let mut rng = RngState::new(5);
    let g = Tensor::randn(&[20_000, 1], 1.0, &mut rng);
    let h = knn_entropy(&g, 3).unwrap();
    let x = Tensor::randn(&[20_000, 1], 1.0, &mut rng);
    let z = Tensor::randn(&[20_000, 1], 1.0, &mut rng);
    let mi = mi_estimate(&x.add(&z).unwrap(), &z, 3).unwrap().value;
    let a = Tensor::randn(&[500, 4], 1.0, &mut rng);
    let same = mi_estimate(&a, &a, 3).unwrap().value;
    let pass = (h - 1.41894).abs() < 0.05 && (mi - 0.34657).abs() < 0.05 && same == 0.0;
    outcome(pass, format!("H {h:.4} (1.41894), I {mi:.4} (0.34657), I(A,A) {same}"))
}

fn mi_monotone(world: &World) -> Outcome {
    let etas = [0.1, 1.0, 10.0, 100.0].map(Eta::Finite);
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 0..3 {
        let vals: Vec<f64> = etas.iter().map(|&e| mi_cell(world, e, seed).unwrap()).collect();
        pass &= vals.windows(2).all(|w| w[1] > w[0]);
        lines.push(format!("[{}]", vals.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")));
    }
    outcome(pass, format!("seeds 0..3: {}", lines.join(" ")))
}

fn inversion(_: &World) -> Outcome {
    let cfg = EncoderConfig::default();
    let (table, _) = init_toy_model(&cfg).unwrap();
    let nn = (0..table.vocab_size()).map(|i| vocab_knn_distance(&table, i, 1)).sum::<f64>() / table.vocab_size() as f64;
    // Expected noise norm d / eta set to six times the mean 1-NN distance.
    let eta = cfg.dim as f64 / (6.0 * nn);
    let mut rng = RngState::new(7);
    let ids: Vec<usize> = (0..2000).map(|_| rng.gen_range(0..table.vocab_size())).collect();
    let x = embed_tokens(&ids, &table).unwrap();
    let clean = inversion_attack(&x, &table, &ids).unwrap().accuracy;
    let (mut acc, mut znorm) = (0.0, 0.0);
    for seed in 0..5 {
        let mut rng = RngState::new(70 + seed);
        let (xt, z) = privatize(&x, Eta::Finite(eta), &mut rng).unwrap();
        acc += inversion_attack(&xt, &table, &ids).unwrap().accuracy / 5.0;
        znorm += (0..z.rows()).map(|i| z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>()
            / z.rows() as f64
            / 5.0;
    }
    let pass = clean == 1.0 && znorm >= 5.0 * nn && acc <= 0.05;
    outcome(
        pass,
        format!("inf-eta acc {clean}; eta {eta:.3}: mean |z| {znorm:.2} vs 5 x {nn:.3}, acc {acc:.4}"),
    )
}

fn gradient_check(_: &World) -> Outcome {
    // Toy size, so every layer type has at least 100 entries to sample.
    let cfg = DenoiserConfig { init_std: 0.2, ..Default::default() };
    let mut rng = RngState::new(8);
    let mut w = DenoiserWeights::init(&cfg, &mut rng).unwrap();
    for name in ["segment", "position"] {
        let shape = w.store.get(name).unwrap().shape().to_vec();
        *w.store.get_mut(name).unwrap() = Tensor::randn(&shape, 0.2, &mut rng);
    }
    let examples: Vec<TrainingExample> = (0..3)
        .map(|i| {
            let n = 2 + i;
            TrainingExample {
                e_n: Tensor::randn(&[32], 1.0, &mut rng).into_data(),
                x_tilde: Tensor::randn(&[n, 32], 1.0, &mut rng),
                z: Tensor::randn(&[n, 32], 1.0, &mut rng),
                e_c: Tensor::randn(&[32], 1.0, &mut rng).into_data(),
            }
        })
        .collect();
    let refs: Vec<&TrainingExample> = examples.iter().collect();
    let batch = TrainingBatch::from_examples(&refs).unwrap();
    let report = grad_check(
        &mut w.store,
        |g, s| batch_loss(g, &DenoiserWeights { config: cfg, store: s.clone() }, &batch),
        1e-5,
        100,
        &mut rng,
    )
    .unwrap();
    let kind = |name: &str| match name {
        "segment" | "position" => "embedding",
        n if n.contains(".attn") => "attention",
        n if n.contains(".ln") => "layer_norm",
        n if n.contains(".ff") => "feed_forward",
        _ => "other",
    };
    let mut counts = std::collections::BTreeMap::new();
    for name in report.per_parameter.keys() {
        let len = w.store.get(name).unwrap().len().min(100);
        *counts.entry(kind(name)).or_insert(0usize) += len;
    }
    let pass = report.max_relative_error < 1e-5 && counts.len() == 4 && counts.values().all(|&c| c >= 100);
    outcome(pass, format!("max rel err {:.2e}, sampled per type {counts:?}", report.max_relative_error))
}

fn mid_eta(world: &World) -> [Eta; 2] {
    partition_plan(world).unwrap().intervals[1].2
}

fn denoiser_utility_and_downstream(world: &World) -> (Outcome, Outcome) {
    let reps = mid_eta(world);
    let results: Vec<_> = thread::scope(|s| {
        let hs: Vec<_> = (0..3u64)
            .map(|seed| {
                s.spawn(move || {
                    let t = train_for(world, &denoiser_config(&world.cfg), &reps, reps[0], world.cfg.clip, seed).unwrap();
                    let q = denoise_quality(&t.weights, &t.val_pairs).unwrap();
                    let c: Vec<_> = reps.iter().map(|&e| downstream_comparison(world, &t.weights, e, seed).unwrap()).collect();
                    (q, c)
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut p9 = true;
    let mut d9 = Vec::new();
    let mut p10 = true;
    let mut d10 = Vec::new();
    for (q, cs) in &results {
        p9 &= q.mse_denoised <= 0.5 * q.mse_noisy && q.cos_improved_fraction >= 0.9;
        d9.push(format!("mse {:.4}/{:.4} cos+ {:.2}", q.mse_denoised, q.mse_noisy, q.cos_improved_fraction));
        for c in cs {
            p10 &= c.denoised.acc >= c.noisy.acc + 0.05 && c.clean.acc >= c.denoised.acc;
            d10.push(format!("{:.3}/{:.3}/{:.3}", c.clean.acc, c.denoised.acc, c.noisy.acc));
        }
    }
    (
        outcome(p9, format!("eta {}: {}", reps[0], d9.join("; "))),
        outcome(p10, format!("clean/denoised/noisy acc at eta {} and {}: {}", reps[0], reps[1], d10.join(" "))),
    )
}

fn per_seed<T: Send>(f: impl Fn(u64) -> T + Sync) -> Vec<T> {
    thread::scope(|s| {
        let f = &f;
        let hs: Vec<_> = (0..3u64).map(|seed| s.spawn(move || f(seed))).collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

fn server_ablation(world: &World) -> Outcome {
    let eta = mid_eta(world)[0];
    let cells = per_seed(|seed| server_ablation_cell(world, eta, seed).unwrap());
    let mut pass = cells.iter().all(|c| c.client.val_mse <= c.server.val_mse);
    let cases = [
        ((1.0, 1.0, 4.0, 1), 0.581_976_706_869_326_4),
        ((0.5, 2.0, 10.0, 3), 0.484_980_589_057_772),
        ((3.0, 0.25, 1.5, 2), 0.167_860_337_700_439_4),
        ((10.0, 1.0, 32.0, 8), 4.540_199_100_968_777e-5),
        ((0.01, 3.0, 7.0, 5), 11.492_541_653_541_948),
    ];
    let mut worst = 0.0f64;
    for ((eta, b, s, k), want) in cases {
        let got = server_mse_lower_bound(eta, b, s, k).unwrap();
        worst = worst.max((got - want).abs() / want);
    }
    pass &= worst <= 1e-12;
    let d: Vec<String> = cells.iter().map(|c| format!("{:.5}<={:.5}", c.client.val_mse, c.server.val_mse)).collect();
    outcome(pass, format!("eta {eta}: client<=server mse {}; bound rel err {worst:.1e}", d.join(" ")))
}

fn clipping_ablation(world: &World) -> Outcome {
    let eta = partition_plan(world).unwrap().intervals[0].2[0];
    let arms = per_seed(|seed| (clipping_arm(world, eta, seed, true).unwrap(), clipping_arm(world, eta, seed, false).unwrap()));
    let pass = arms.iter().all(|(c, u)| c.val_mse <= u.val_mse);
    let d: Vec<String> = arms.iter().map(|(c, u)| format!("{:.5}<={:.5}", c.val_mse, u.val_mse)).collect();
    outcome(pass, format!("eta {eta}: clipped<=unclipped mse {}", d.join(" ")))
}

fn protocol(_: &World) -> Outcome {
    let mut rng = RngState::new(13);
    let mut roundtrip = true;
    for i in 0..1000 {
        let (n, d) = (rng.gen_range(1..40u32), rng.gen_range(1..40u32));
        let f = Frame {
            version: 1,
            msg_type: [MsgType::EmbedRequest, MsgType::EmbedResponse, MsgType::Error][i % 3],
            n,
            d,
            payload: (0..n * d).map(|_| rng.gen()).collect(),
        };
        let bytes = encode_frame(&f);
        roundtrip &= decode_frame(&bytes).map(|g| g == f && encode_frame(&g) == bytes).unwrap_or(false);
    }

    let (_, encoder) = init_toy_model(&EncoderConfig::default()).unwrap();
    let (client_end, server_end) = duplex();
    let enc = encoder.clone();
    let server = thread::spawn(move || serve_connection(server_end, &enc));
    let mut session = Session::new(0, Metered::new(client_end));
    let counters = session.transport().counters();
    let (mut bytes_ok, mut encode_ok) = (true, true);
    for _ in 0..50 {
        let n = rng.gen_range(1..32);
        let x = Tensor::randn(&[n, 32], 1.0, &mut rng);
        let (up, down) = (counters.sent(), counters.received());
        let e = client_request(&x, &mut session).unwrap();
        bytes_ok &= counters.sent() - up == frame_len(n, 32) as u64
            && counters.received() - down == frame_len(1, 32) as u64
            && frame_len(n, 32) - frame_len(0, 0) == 4 * n * 32
            && frame_len(1, 32) - frame_len(0, 0) == 4 * 32;
        let direct = encode(&x.map(|v| v as f32 as f64), &encoder).unwrap();
        encode_ok &= e
            .values
            .iter()
            .zip(&direct.values)
            .all(|(a, b)| (a - b).abs() <= b.abs() * f64::from(f32::EPSILON) * 0.5 + f64::MIN_POSITIVE);
    }
    session.into_transport().into_inner().shutdown();
    server.join().unwrap().unwrap();

    let encoder = Arc::new(encoder);
    let listener = bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let srv = {
        let e = Arc::clone(&encoder);
        thread::spawn(move || serve_tcp(listener, e, Some(8)))
    };
    let workloads: Vec<Vec<Tensor>> = (0..8)
        .map(|c| {
            let mut r = RngState::new(1000 + c);
            (0..100).map(|_| Tensor::randn(&[r.gen_range(1..20), 32], 1.0, &mut r)).collect()
        })
        .collect();
    let serial: Vec<Vec<Vec<u8>>> = workloads
        .iter()
        .map(|w| w.iter().map(|x| handle_request(&encode_frame(&Frame::request(x)), &encoder)).collect())
        .collect();
    let concurrent: Vec<Vec<Vec<u8>>> = workloads
        .into_iter()
        .map(|w| {
            thread::spawn(move || {
                let mut s = Session::new(0, TcpStream::connect(addr).unwrap());
                w.iter()
                    .map(|x| {
                        let e = client_request(x, &mut s).unwrap();
                        encode_frame(&Frame::response(&SentenceEmbedding::new(e.values, EmbeddingRole::Noisy)))
                    })
                    .collect()
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .map(|h| h.join().unwrap())
        .collect();
    srv.join().unwrap().unwrap();
    let concurrent_ok = concurrent == serial;
    outcome(
        roundtrip && bytes_ok && encode_ok && concurrent_ok,
        format!("roundtrip {roundtrip}, byte counts {bytes_ok}, 8x100 concurrent==serial {concurrent_ok}, f32 encode {encode_ok}"),
    )
}

fn update_drill(world: &World) -> Outcome {
    let eta = mid_eta(world)[0];
    let cells = per_seed(|seed| drill_cell(world, eta, seed).unwrap());
    let pass = cells.iter().all(|r| r.post_update >= 1.1 * r.pre_update && r.finetuned <= 1.2 * r.pre_update);
    let d: Vec<String> = cells
        .iter()
        .map(|r| format!("{:.5}->{:.5}->{:.5}", r.pre_update, r.post_update, r.finetuned))
        .collect();
    outcome(pass, format!("eta {eta}: pre->drift->finetuned {}", d.join(" ")))
}

fn determinism(_: &World) -> Outcome {
    let runs: [&[&str]; 4] = [
        &["mi", "--eta", "1,10", "--seed", "0,1", "--n", "2000"],
        &["attack", "attribute", "--eta", "10"],
        &["similarity", "--seed", "0,1"],
        &["sweep", "--eta", "20,inf", "--set", "methods=snd,tok_emb_priv", "--set", "denoiser_epochs=1"],
    ];
    let mut bad = Vec::new();
    for args in runs {
        let once = || Command::new(env!("CARGO_BIN_EXE_snd")).args(args).output().unwrap();
        let (a, b) = (once(), once());
        if !a.status.success() || a.stdout != b.stdout || a.stdout.is_empty() {
            bad.push(args[0]);
        }
    }
    outcome(bad.is_empty(), format!("4 scenarios run twice, mismatches: {bad:?}"))
}

/// Optional arguments select criteria by number, e.g. `-- 8 13`.
fn main() {
    let start = Instant::now();
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| only.is_empty() || only.contains(&id);
    let world = World::build(&ExperimentConfig::default()).expect("default world");
    let checks: [(usize, &str, Check); 12] = [
        (1, "noise law", noise_law),
        (2, "laplace tail", laplace_tail),
        (3, "density ratio", ratio_property),
        (4, "clipping", clipping),
        (5, "entropy oracles", entropy_oracles),
        (6, "mi monotone in eta", mi_monotone),
        (7, "inversion attack", inversion),
        (8, "gradient check", gradient_check),
        (11, "server-denoise ablation", server_ablation),
        (12, "clipping ablation", clipping_ablation),
        (13, "protocol", protocol),
        (14, "model-update drill", update_drill),
    ];
    let mut results: Vec<(usize, &str, Outcome)> = thread::scope(|s| {
        let world = &world;
        let pair = (wanted(9) || wanted(10)).then(|| s.spawn(move || denoiser_utility_and_downstream(world)));
        let det = wanted(15).then(|| s.spawn(move || determinism(world)));
        let hs: Vec<_> = checks
            .iter()
            .filter(|c| wanted(c.0))
            .map(|&(id, name, f)| (id, name, s.spawn(move || f(world))))
            .collect();
        let mut out: Vec<_> = hs.into_iter().map(|(id, name, h)| (id, name, h.join().unwrap())).collect();
        if let Some(pair) = pair {
            let (o9, o10) = pair.join().unwrap();
            out.push((9, "denoiser utility", o9));
            out.push((10, "downstream gain", o10));
        }
        if let Some(det) = det {
            out.push((15, "cli determinism", det.join().unwrap()));
        }
        out.retain(|r| wanted(r.0));
        out
    });
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, name, o) in &results {
        println!("criterion {id:>2} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {}/{} passed in {:.0}s", results.len() - failed, results.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
