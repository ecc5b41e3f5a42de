//! Prediction quality, action-swap probing, and activation dumps.

use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{Dataset, Sequence};
use crate::error::{Error, Result};
use crate::network::{LayerState, Network};
use crate::tensor::{self, Tensor};
use crate::training::check_dims;

/// Prediction metrics over a dataset. MSE values are per frame (mean over
/// pixels), averaged over every step `t ≥ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_sequence_mse: Vec<f64>,
    pub mse: f64,
    /// Predicting `frame(t-1)` for `frame(t)`.
    pub per_sequence_baseline: Vec<f64>,
    pub baseline_mse: f64,
    /// Mean `|E_l(t)|` over sequences, indexed `[t][l]`.
    pub layer_errors: Vec<Vec<f64>>,
    pub swap_accuracy: Option<f64>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sequences\t{}", self.per_sequence_mse.len())?;
        writeln!(f, "mse\t{:.6e}", self.mse)?;
        writeln!(f, "baseline_mse\t{:.6e}", self.baseline_mse)?;
        if self.baseline_mse > 0.0 {
            writeln!(f, "ratio\t{:.4}", self.mse / self.baseline_mse)?;
        }
        if let Some(a) = self.swap_accuracy {
            writeln!(f, "swap_accuracy\t{a:.4}")?;
        }
        for (t, es) in self.layer_errors.iter().enumerate() {
            let cols: Vec<String> = es.iter().map(|e| format!("{e:.6e}")).collect();
            writeln!(f, "mean_abs_error\tt={t}\t{}", cols.join("\t"))?;
        }
        Ok(())
    }
}

fn frame_mse(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
    s / a.len() as f64
}

struct SeqStats {
    model: f64,
    baseline: f64,
    counted: usize,
    layer_errors: Vec<Vec<f64>>,
}

fn sequence_stats(net: &Network<f32>, seq: &Sequence) -> Result<SeqStats> {
    let roll = net.rollout(seq)?;
    let (mut model, mut baseline) = (0.0, 0.0);
    for t in 1..seq.len() {
        model += frame_mse(&roll.predictions[t], &seq.frames[t]);
        baseline += frame_mse(&seq.frames[t - 1], &seq.frames[t]);
    }
    // errors are rectified, so mean |E| is the plain mean
    let layer_errors = roll.layer_errors.iter().map(|es| es.iter().map(|&e| e as f64).collect()).collect();
    Ok(SeqStats { model, baseline, counted: seq.len().saturating_sub(1), layer_errors })
}

/// One-step-ahead MSE against the copy-last-frame baseline. Sequences are
/// evaluated in parallel and reduced in sequence order.
pub fn eval_mse(net: &Network<f32>, ds: &Dataset) -> Result<EvalReport> {
    check_dims(&net.config, ds)?;
    let stats = ds.sequences.par_iter().map(|s| sequence_stats(net, s)).collect::<Result<Vec<_>>>()?;
    let per = |f: &dyn Fn(&SeqStats) -> f64| -> Vec<f64> {
        stats.iter().map(|s| if s.counted == 0 { 0.0 } else { f(s) / s.counted as f64 }).collect()
    };
    let counted: usize = stats.iter().map(|s| s.counted).sum();
    let total = |f: &dyn Fn(&SeqStats) -> f64| -> f64 {
        if counted == 0 {
            0.0
        } else {
            stats.iter().map(f).sum::<f64>() / counted as f64
        }
    };
    let steps = stats.iter().map(|s| s.layer_errors.len()).max().unwrap_or(0);
    let mut layer_errors = vec![vec![0.0; net.config.layers]; steps];
    let mut seen = vec![0usize; steps];
    for s in &stats {
        for (t, es) in s.layer_errors.iter().enumerate() {
            seen[t] += 1;
            for (acc, e) in layer_errors[t].iter_mut().zip(es) {
                *acc += e;
            }
        }
    }
    for (row, n) in layer_errors.iter_mut().zip(&seen) {
        row.iter_mut().for_each(|v| *v /= *n as f64);
    }
    Ok(EvalReport {
        per_sequence_mse: per(&|s| s.model),
        mse: total(&|s| s.model),
        per_sequence_baseline: per(&|s| s.baseline),
        baseline_mse: total(&|s| s.baseline),
        layer_errors,
        swap_accuracy: None,
    })
}

/// Flat index of the single largest value, or an error when the maximum is
/// shared or the tensor holds more than one channel.
fn unique_argmax(f: &Tensor<f32>) -> Result<usize> {
    let i = f.argmax();
    let m = f.data()[i];
    if f.data().iter().filter(|&&v| v == m).count() != 1 {
        return Err(Error::invalid("frame has no unique maximum; probing needs single-object frames"));
    }
    Ok(i)
}

/// Fraction of steps `t ≥ first_step` whose predicted argmax lands on the
/// true next position.
pub fn next_frame_accuracy(net: &Network<f32>, ds: &Dataset, first_step: usize) -> Result<f64> {
    check_dims(&net.config, ds)?;
    let per = ds
        .sequences
        .par_iter()
        .map(|s| -> Result<(usize, usize)> {
            let roll = net.rollout(s)?;
            let mut hit = 0;
            let mut n = 0;
            for t in first_step.max(1)..s.len() {
                n += 1;
                hit += (roll.predictions[t].argmax() == unique_argmax(&s.frames[t])?) as usize;
            }
            Ok((hit, n))
        })
        .collect::<Result<Vec<_>>>()?;
    let (hit, n) = per.iter().fold((0, 0), |(a, b), (h, m)| (a + h, b + m));
    Ok(if n == 0 { 0.0 } else { hit as f64 / n as f64 })
}

/// Outcome of [`action_swap_probe`].
#[derive(Debug, Clone, PartialEq)]
pub struct SwapProbe {
    /// Probe states: every sequence at every step `t ≥ 1`.
    pub states: usize,
    /// Fraction correct over both actions.
    pub accuracy: f64,
    pub right_accuracy: f64,
    pub down_accuracy: f64,
    /// Fraction of states where the two predictions are not bitwise equal.
    pub differing: f64,
}

/// Replays each visual history, then predicts the next frame once under
/// "right" `[1, 0]` and once under "down" `[0, 1]`. A prediction is correct
/// when its argmax sits one cell right (resp. down, with wrap-around) of the
/// object's last seen position.
pub fn action_swap_probe(net: &Network<f32>, ds: &Dataset) -> Result<SwapProbe> {
    check_dims(&net.config, ds)?;
    if ds.action_dim != 2 {
        return Err(Error::invalid(format!("swap probe needs 2-d actions, dataset has {}", ds.action_dim)));
    }
    let (h, w) = (ds.height, ds.width);
    let per = ds
        .sequences
        .par_iter()
        .map(|s| -> Result<[usize; 4]> {
            let mut states = net.init_state();
            let mut counts = [0usize; 4];
            for t in 0..s.len() {
                if t >= 1 {
                    let at = unique_argmax(&s.frames[t - 1])?;
                    let (row, col) = (at / w, at % w);
                    let predict = |action: [f32; 2]| -> Result<Tensor<f32>> {
                        let mut probe: Vec<LayerState<f32>> = states.clone();
                        net.step(&mut probe, &s.frames[t], &action)
                    };
                    let right = predict([1.0, 0.0])?;
                    let down = predict([0.0, 1.0])?;
                    counts[0] += 1;
                    counts[1] += (right.argmax() == row * w + (col + 1) % w) as usize;
                    counts[2] += (down.argmax() == ((row + 1) % h) * w + col) as usize;
                    counts[3] += (right != down) as usize;
                }
                net.step(&mut states, &s.frames[t], &s.actions[t])?;
            }
            Ok(counts)
        })
        .collect::<Result<Vec<_>>>()?;
    let c = per.iter().fold([0usize; 4], |mut acc, x| {
        acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
        acc
    });
    let n = c[0].max(1) as f64;
    Ok(SwapProbe {
        states: c[0],
        accuracy: (c[1] + c[2]) as f64 / (2.0 * n),
        right_accuracy: c[1] as f64 / n,
        down_accuracy: c[2] as f64 / n,
        differing: c[3] as f64 / n,
    })
}

/// Copy of `net` whose action MLPs output uniform weights for every action.
pub fn uniform_attention(net: &Network<f32>) -> Network<f32> {
    let mut out = net.clone();
    for layer in &mut out.params.layers {
        for t in [&mut layer.mlp.w1, &mut layer.mlp.b1, &mut layer.mlp.w2, &mut layer.mlp.b2] {
            *t = Tensor::zeros(t.shape());
        }
    }
    out
}

/// Generative-unit activity of one layer at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct GuStep {
    /// `h_l^d(t)` for every unit `d`.
    pub units: Vec<Tensor<f32>>,
    /// `w(t)`.
    pub attention: Vec<f32>,
    /// `R_l(t)` as stored by the network.
    pub r: Tensor<f32>,
}

impl GuStep {
    /// `Σ_d w_d · h^d`, accumulated in the same order as the network.
    pub fn reconstruct_r(&self) -> Tensor<f32> {
        let mut r = tensor::scale(&self.units[0], self.attention[0]);
        for (h, &w) in self.units.iter().zip(&self.attention).skip(1) {
            r = tensor::add(&r, &tensor::scale(h, w)).expect("units share a shape");
        }
        r
    }
}

/// Runs `seq` and records layer `layer`'s bank at every step.
pub fn dump_gu(net: &Network<f32>, seq: &Sequence, layer: usize) -> Result<Vec<GuStep>> {
    if layer >= net.config.layers {
        return Err(Error::invalid(format!("layer {layer} out of range for a {}-layer network", net.config.layers)));
    }
    let mut states = net.init_state();
    let mut out = Vec::with_capacity(seq.len());
    for (frame, action) in seq.frames.iter().zip(&seq.actions) {
        net.step(&mut states, frame, action)?;
        let s = &states[layer];
        out.push(GuStep {
            units: s.units.iter().map(|u| u.h.clone()).collect(),
            attention: s.attention.data().to_vec(),
            r: s.r.clone(),
        });
    }
    Ok(out)
}

/// Writes a dump as PGM images plus `attention.tsv`. Activations lie in
/// (−1, 1) and are mapped to [0, 1] by `(v + 1) / 2` before export. Files are
/// named `t{t}_unit{d}_ch{c}.pgm` and `t{t}_r_ch{c}.pgm`.
pub fn write_gu_dump(steps: &[GuStep], dir: impl AsRef<Path>) -> Result<usize> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let shift = |t: &Tensor<f32>| t.map(|v| (v + 1.0) / 2.0);
    let mut files = 0;
    let mut table = String::from("t");
    for d in 0..steps.first().map_or(0, |s| s.attention.len()) {
        table.push_str(&format!("\tw{}", d + 1));
    }
    table.push('\n');
    for (t, s) in steps.iter().enumerate() {
        let mut write = |tag: String, x: &Tensor<f32>| -> Result<()> {
            let (_, h, w) = x.chw()?;
            for (ci, ch) in shift(x).data().chunks(h * w).enumerate() {
                let img = Tensor::new(&[h, w], ch.to_vec())?;
                export_pgm(&img, dir.join(format!("t{t:03}_{tag}_ch{ci:02}.pgm")))?;
                files += 1;
            }
            Ok(())
        };
        for (d, h) in s.units.iter().enumerate() {
            write(format!("unit{d}"), h)?;
        }
        write("r".into(), &s.r)?;
        table.push_str(&t.to_string());
        for w in &s.attention {
            table.push_str(&format!("\t{w}"));
        }
        table.push('\n');
    }
    let path = dir.join("attention.tsv");
    fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
    Ok(files + 1)
}

/// ASCII PGM text for a single-channel tensor (`H×W` or `1×H×W`).
pub fn pgm_string(image: &Tensor<f32>) -> Result<String> {
    let (h, w) = match image.shape() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        s => return Err(Error::invalid(format!("PGM export needs one channel, got shape {s:?}"))),
    };
    let mut out = format!("P2\n{w} {h}\n255\n");
    for row in image.data().chunks(w) {
        let px: Vec<String> = row.iter().map(|&v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string()).collect();
        out.push_str(&px.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn export_pgm(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = pgm_string(image)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses ASCII PGM (`P2`) text into an `H×W` tensor with values
/// `pixel / maxval`. Comments are not supported.
pub fn parse_pgm(text: &str) -> Result<Tensor<f32>> {
    let mut tokens = text.split_ascii_whitespace().map(|tok| (tok.as_ptr() as u64 - text.as_ptr() as u64, tok));
    let mut next = |what: &str| -> Result<(u64, &str)> {
        tokens.next().ok_or_else(|| Error::format(text.len() as u64, format!("PGM ends before {what}")))
    };
    let (at, magic) = next("magic")?;
    if magic != "P2" {
        return Err(Error::format(at, format!("expected PGM magic P2, found {magic:?}")));
    }
    let mut int = |what: &str| -> Result<(u64, usize)> {
        let (at, tok) = next(what)?;
        tok.parse::<usize>().map(|v| (at, v)).map_err(|_| Error::format(at, format!("{what}: not an integer: {tok:?}")))
    };
    let (_, w) = int("width")?;
    let (_, h) = int("height")?;
    let (at, maxval) = int("maxval")?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::format(at, format!("bad PGM header {w}×{h} maxval {maxval}")));
    }
    let mut data = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        let (at, v) = int("pixel")?;
        if v > maxval {
            return Err(Error::format(at, format!("pixel {v} exceeds maxval {maxval}")));
        }
        data.push(v as f32 / maxval as f32);
    }
    if let Ok((at, _)) = int("end of data") {
        return Err(Error::format(at, "trailing data after PGM pixels"));
    }
    Tensor::new(&[h, w], data)
}

pub fn import_pgm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_minworld, Direction};
    use crate::network::{NetworkConfig, Parameters};

    fn minworld() -> Dataset {
        gen_minworld(8, 12, 12, &[Direction::Right, Direction::Down])
    }

    fn zero_net() -> Network<f32> {
        let cfg = NetworkConfig::new(2, 8, 12, 1, 2);
        let p = Parameters::zeros(&cfg);
        Network::new(cfg, p).unwrap()
    }

    #[test]
    fn zero_net_and_baseline_on_minworld() {
        let ds = minworld();
        let r = eval_mse(&zero_net(), &ds).unwrap();
        assert!((r.mse - 1.0 / 96.0).abs() < 1e-12);
        assert!((r.baseline_mse - 2.0 / 96.0).abs() < 1e-12);
        assert_eq!(r.per_sequence_mse.len(), 192);
        assert_eq!(r.layer_errors.len(), 12);
    }

    #[test]
    fn eval_is_order_independent() {
        let mut ds = gen_minworld(8, 12, 4, &[Direction::Right, Direction::Down]);
        let net = Network::init(NetworkConfig::new(2, 8, 12, 1, 2), 3).unwrap();
        let a = eval_mse(&net, &ds).unwrap();
        ds.sequences.reverse();
        let b = eval_mse(&net, &ds).unwrap();
        let mut rev = b.per_sequence_mse.clone();
        rev.reverse();
        assert_eq!(a.per_sequence_mse, rev);
        assert!((a.mse - b.mse).abs() <= 1e-15 * a.mse);
        assert_eq!(a, eval_mse(&net, &gen_minworld(8, 12, 4, &[Direction::Right, Direction::Down])).unwrap());
    }

    #[test]
    fn dims_mismatch_is_config_error() {
        let ds = gen_minworld(4, 4, 3, &[Direction::Right]);
        assert!(matches!(eval_mse(&zero_net(), &ds), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_mlp_makes_actions_indistinguishable() {
        let ds = gen_minworld(8, 12, 5, &[Direction::Right, Direction::Down]);
        let net = uniform_attention(&Network::init(NetworkConfig::new(2, 8, 12, 1, 2), 8).unwrap());
        let p = action_swap_probe(&net, &ds).unwrap();
        assert_eq!(p.differing, 0.0);
        assert_eq!(p.states, 192 * 4);
        assert!(p.right_accuracy.min(p.down_accuracy) <= 0.5);
    }

    #[test]
    fn probe_rejects_ambiguous_frames() {
        let mut ds = gen_minworld(8, 12, 3, &[Direction::Right]);
        ds.sequences[0].frames[0] = Tensor::zeros(&[1, 8, 12]);
        assert!(matches!(action_swap_probe(&zero_net(), &ds), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn gu_dump_reconstructs_r() {
        let ds = minworld();
        let net = Network::init(NetworkConfig::new(2, 8, 12, 1, 2), 2).unwrap();
        for layer in 0..2 {
            let steps = dump_gu(&net, &ds.sequences[100], layer).unwrap();
            assert_eq!(steps.len(), 12);
            for s in &steps {
                assert_eq!(s.units.len(), 2);
                assert_eq!(s.reconstruct_r(), s.r);
            }
        }
        assert!(matches!(dump_gu(&net, &ds.sequences[0], 2), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn one_hot_attention_dump_matches_unit() {
        let ds = minworld();
        let mut net = Network::init(NetworkConfig::new(2, 8, 12, 1, 2), 2).unwrap();
        net.params.layers[0].mlp.b2 = Tensor::new(&[2], vec![0.0, 1e4]).unwrap();
        for s in dump_gu(&net, &ds.sequences[3], 0).unwrap() {
            assert_eq!(s.attention, vec![0.0, 1.0]);
            assert_eq!(s.r, s.units[1]);
        }
    }

    #[test]
    fn dump_files() {
        let ds = gen_minworld(8, 12, 2, &[Direction::Down]);
        let net = Network::init(NetworkConfig::new(2, 8, 12, 1, 2), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let steps = dump_gu(&net, &ds.sequences[0], 0).unwrap();
        let n = write_gu_dump(&steps, dir.path()).unwrap();
        // 2 steps × (2 units + R) × 8 channels, plus the table
        assert_eq!(n, 2 * 3 * 8 + 1);
        let table = fs::read_to_string(dir.path().join("attention.tsv")).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "t\tw1\tw2");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0\t"));
        assert!(dir.path().join("t001_unit1_ch07.pgm").exists());
    }

    #[test]
    fn pgm_encoding() {
        let f = crate::data::minworld::frame_with_pixel(8, 12, (0, 1));
        let text = pgm_string(&f).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(&lines[..3], &["P2", "12 8", "255"]);
        assert_eq!(lines[3], "0 255 0 0 0 0 0 0 0 0 0 0");
        assert_eq!(lines.len(), 3 + 8);
        let zero = pgm_string(&Tensor::zeros(&[2, 3])).unwrap();
        assert_eq!(zero, "P2\n3 2\n255\n0 0 0\n0 0 0\n");
        let mid = pgm_string(&Tensor::new(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        assert!(mid.ends_with("128 0 255\n"));
        assert!(pgm_string(&Tensor::zeros(&[2, 2, 2])).is_err());
        assert!(matches!(export_pgm(&f, "/nonexistent/dir/x.pgm"), Err(Error::Io { .. })));
    }

    #[test]
    fn pgm_round_trip() {
        let img = Tensor::from_fn(&[5, 7], |i| (i * 7 % 256) as f32 / 255.0);
        let text = pgm_string(&img).unwrap();
        let back = parse_pgm(&text).unwrap();
        assert_eq!(back, img);
        assert_eq!(pgm_string(&back).unwrap(), text);
        // dropping whole tokens from the end
        for (cut, _) in text.match_indices(char::is_whitespace).filter(|(i, _)| *i < text.trim_end().len()) {
            assert!(matches!(parse_pgm(&text[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        assert!(matches!(parse_pgm("P5\n1 1\n255\n0"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_pgm("P2\n1 1\n255\n256"), Err(Error::Format { offset: 11, .. })));
        assert!(matches!(parse_pgm("P2\n1 1\n255\n3 4"), Err(Error::Format { .. })));
    }
}
