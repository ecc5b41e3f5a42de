//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//!
//! The two training reproductions take most of the runtime (about half an
//! hour on one core).

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use afa_core::data::{decode_dataset, encode_dataset, gen_minworld, sim_linetracer, Direction, TracerConfig};
use afa_core::eval::{
    action_swap_probe, dump_gu, eval_mse, next_frame_accuracy, parse_pgm, pgm_string, uniform_attention,
};
use afa_core::training::{
    decode_checkpoint, encode_checkpoint, gradient_check_with, GradCheckOptions, TrainConfig, Trainer,
};
use afa_core::{Dataset, Error, Network, NetworkConfig, PaddingMode, Tensor};

/// Written to the process stdout directly so the line shows without `--nocapture`.
fn verdict(name: &str, pass: bool, detail: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    let _ = out.flush();
    drop(out);
    assert!(pass, "{name}: {detail}");
}

fn minworld() -> Dataset {
    gen_minworld(8, 12, 12, &[Direction::Right, Direction::Down])
}

/// The minimalistic-world run: 2 layers, two units per layer, η = 0.001.
/// Circular padding matches the toroidal world; the prediction ReLU passes
/// a 0.1 slope backward, without which training collapses to dark frames.
fn minworld_setup() -> (NetworkConfig, TrainConfig) {
    let net = NetworkConfig::new(2, 8, 12, 1, 2).with_units(2).with_padding_mode(PaddingMode::Circular);
    let train =
        TrainConfig { learning_rate: 0.001, max_iters: 30_000, prediction_slope: 0.1, seed: 0, ..TrainConfig::default() };
    (net, train)
}

fn trained_minworld() -> &'static Network<f32> {
    static NET: OnceLock<Network<f32>> = OnceLock::new();
    NET.get_or_init(|| {
        let ds = minworld();
        let (netcfg, cfg) = minworld_setup();
        let start = Instant::now();
        let mut trainer = Trainer::new(&ds, netcfg, cfg).unwrap();
        let stop = trainer.run(|_, _| {}).unwrap();
        let out = trainer.finish(stop);
        let _ = writeln!(
            std::io::stdout(),
            "minworld: {} iterations in {:.0} s, final loss {:.5}",
            out.losses.len(),
            start.elapsed().as_secs_f64(),
            out.losses.last().unwrap()
        );
        out.checkpoint
    })
}

#[test]
fn gradient_correctness() {
    let start = Instant::now();
    let small = NetworkConfig::new(1, 4, 4, 1, 2).with_units(2);
    let small_opts = GradCheckOptions { steps: 3, samples_per_tensor: None, ..GradCheckOptions::new(1e-5, 1e-4) };
    let a = gradient_check_with(&small, &small_opts).unwrap();
    let large = NetworkConfig::new(2, 8, 12, 1, 2).with_units(2);
    let large_opts = GradCheckOptions { steps: 4, samples_per_tensor: Some(16), ..GradCheckOptions::new(1e-5, 1e-4) };
    let b = gradient_check_with(&large, &large_opts).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let checked: usize = a.tensors.iter().chain(&b.tensors).map(|t| t.checked).sum();
    verdict(
        "gradient correctness",
        a.passed() && b.passed() && secs < 60.0,
        format!(
            "1-layer 4×4 T=3 max rel {:.2e}, 2-layer 8×12 T=4 max rel {:.2e}, {checked} entries, {secs:.1} s",
            a.max_rel_err(),
            b.max_rel_err()
        ),
    );
}

#[test]
fn shape_conformance() {
    let mut ok = true;
    let mut seen = Vec::new();
    for layers in [2, 3] {
        let cfg = NetworkConfig::new(layers, 8, 12, 1, 2);
        let net = Network::<f32>::init(cfg.clone(), 1).unwrap();
        let mut states = net.init_state();
        let frame = Tensor::from_fn(&[1, 8, 12], |i| (i % 7) as f32 / 7.0);
        net.step(&mut states, &frame, &[1.0, 0.0]).unwrap();
        let dims = [(8, 12), (4, 6), (2, 3)];
        for (l, s) in states.iter().enumerate() {
            let (h, w) = dims[l];
            let c = cfg.target_channels[l];
            ok &= s.target.shape() == [c, h, w];
            ok &= s.prediction.shape() == [c, h, w];
            ok &= s.error.shape() == [2 * c, h, w];
            ok &= s.r.shape() == [cfg.r_channels[l], h, w];
            ok &= s.units.len() == 2;
            ok &= s.error.data().iter().all(|&v| v >= 0.0);
            seen.push(format!("{}×{}×{}", s.error.shape()[0], h, w));
        }
        ok &= cfg.layer_dims() == dims[..layers];
    }
    verdict("shape conformance", ok, format!("E shapes {}", seen.join(", ")));
}

#[test]
fn minworld_reproduction() {
    let ds = minworld();
    let net = trained_minworld();
    let acc = next_frame_accuracy(net, &ds, 2).unwrap();
    let report = eval_mse(net, &ds).unwrap();
    let ratio = report.mse / report.baseline_mse;
    let probe = action_swap_probe(net, &ds).unwrap();
    verdict(
        "minworld reproduction",
        acc >= 0.95 && ratio < 0.5 && probe.accuracy >= 0.90,
        format!(
            "argmax accuracy {acc:.4} (≥ 0.95), MSE {:.3e} vs baseline {:.3e} ratio {ratio:.3} (< 0.5), swap probe {:.4} (right {:.3}, down {:.3}) (≥ 0.90)",
            report.mse, report.baseline_mse, probe.accuracy, probe.right_accuracy, probe.down_accuracy
        ),
    );
}

#[test]
fn action_ablation() {
    let ds = minworld();
    let net = trained_minworld();
    let uniform = action_swap_probe(&uniform_attention(net), &ds).unwrap();
    let trained = action_swap_probe(net, &ds).unwrap();
    verdict(
        "action ablation",
        uniform.differing == 0.0 && trained.differing >= 0.90,
        format!(
            "uniform attention differs on {:.4} of {} probe states (= 0), trained on {:.4} (≥ 0.90)",
            uniform.differing, uniform.states, trained.differing
        ),
    );
}

#[test]
fn linetracer_reproduction() {
    let train_cfg = TracerConfig { steps: 6000, seed: 0, ..TracerConfig::default() };
    let test_cfg = TracerConfig { steps: 1000, seed: 1, ..TracerConfig::default() };
    let train = sim_linetracer(&train_cfg).unwrap();
    let test = sim_linetracer(&test_cfg).unwrap();
    let mut netcfg = NetworkConfig::new(3, 8, 12, 1, 2);
    netcfg.mlp_hidden = 4;
    let cfg = TrainConfig { max_iters: 6000, seed: 0, ..TrainConfig::default() };
    let start = Instant::now();
    let mut trainer = Trainer::new(&train, netcfg, cfg).unwrap();
    let stop = trainer.run(|_, _| {}).unwrap();
    let net = trainer.finish(stop).checkpoint;
    let report = eval_mse(&net, &test).unwrap();
    verdict(
        "line-tracer reproduction",
        report.mse < report.baseline_mse,
        format!(
            "3-layer net, {} training steps, {:.0} s; held-out MSE {:.4e} vs copy-last baseline {:.4e} (ratio {:.3})",
            train_cfg.steps,
            start.elapsed().as_secs_f64(),
            report.mse,
            report.baseline_mse,
            report.mse / report.baseline_mse
        ),
    );
}

#[test]
fn gu_dump_invariant() {
    let ds = minworld();
    let net = trained_minworld();
    let mut steps = 0;
    let mut ok = true;
    for seq in ds.sequences.iter().step_by(17) {
        for layer in 0..net.config.layers {
            for s in dump_gu(net, seq, layer).unwrap() {
                steps += 1;
                ok &= s.units.len() == 2 && s.attention.len() == 2;
                let r = s.reconstruct_r();
                ok &= r.data().iter().zip(s.r.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            }
        }
    }
    verdict("GU-dump invariant", ok, format!("{steps} dumped layer-steps, two units each, R reconstructed bitwise"));
}

#[test]
fn determinism_and_formats() {
    let ds = gen_minworld(8, 12, 6, &[Direction::Right, Direction::Down]);
    let netcfg = NetworkConfig::new(2, 8, 12, 1, 2);
    let run = |seed| {
        let cfg = TrainConfig { max_iters: 30, seed, ..TrainConfig::default() };
        let mut t = Trainer::new(&ds, netcfg.clone(), cfg).unwrap();
        let stop = t.run(|_, _| {}).unwrap();
        encode_checkpoint(&t.finish(stop).checkpoint).unwrap()
    };
    let (a, b, c) = (run(3), run(3), run(4));
    let deterministic = a == b && a != c;

    let data_bytes = encode_dataset(&ds).unwrap();
    let afap = decode_dataset(&data_bytes).unwrap() == ds && encode_dataset(&decode_dataset(&data_bytes).unwrap()).unwrap() == data_bytes;
    let afac = encode_checkpoint(&decode_checkpoint(&a).unwrap()).unwrap() == a;
    let img = Tensor::from_fn(&[8, 12], |i| (i * 37 % 256) as f32 / 255.0);
    let text = pgm_string(&img).unwrap();
    let pgm = parse_pgm(&text).unwrap() == img && pgm_string(&parse_pgm(&text).unwrap()).unwrap() == text;

    // every truncation and a sweep of single-byte corruptions: errors, never panics
    let mut rejected = 0;
    let mut corrupt_total = 0;
    let mut clean = true;
    for bytes in [&data_bytes[..data_bytes.len().min(4096)], &a[..]] {
        for cut in 0..bytes.len() {
            let d = decode_dataset(&bytes[..cut]).err();
            let k = decode_checkpoint(&bytes[..cut]).err();
            clean &= matches!(d, Some(Error::Format { .. })) && matches!(k, Some(Error::Format { .. }));
        }
    }
    for (i, full) in [&data_bytes, &a].into_iter().enumerate() {
        for pos in (0..full.len()).step_by(7).take(2000) {
            let mut bad = full.clone();
            bad[pos] ^= 0xA5;
            corrupt_total += 1;
            let res = std::panic::catch_unwind(|| {
                if i == 0 {
                    decode_dataset(&bad).err().map(|e| matches!(e, Error::Format { .. }))
                } else {
                    decode_checkpoint(&bad).err().map(|e| matches!(e, Error::Format { .. }))
                }
            });
            match res {
                Ok(Some(true)) => rejected += 1,
                Ok(Some(false)) => clean = false,
                Ok(None) => {} // flipped bits inside float payload can stay valid
                Err(_) => clean = false,
            }
        }
    }
    verdict(
        "determinism and formats",
        deterministic && afap && afac && pgm && clean,
        format!(
            "same seed identical checkpoints: {deterministic}; AFAP/AFAC/PGM round trips: {afap}/{afac}/{pgm}; truncations and corruptions handled: {clean} ({rejected} of {corrupt_total} flips rejected)"
        ),
    );
}
