use std::fs;
use std::path::{Path, PathBuf};

use afa_core::data::{gen_minworld, read_dataset, sim_linetracer, write_dataset, Direction, TracerConfig};
use afa_core::eval::{action_swap_probe, dump_gu, eval_mse, export_pgm, next_frame_accuracy, uniform_attention, write_gu_dump};
use afa_core::training::{
    gradient_check_with, load_checkpoint, save_checkpoint, GradCheckOptions, StopReason, TrainConfig, Trainer,
};
use afa_core::{Dataset, Network, NetworkConfig, PaddingMode, Tensor};

use crate::settings::{KeySpec, Settings};
use crate::{
    CliError, Command, Common, DumpGuArgs, EvalArgs, GenLinetracerArgs, GenMinworldArgs, GradcheckArgs, PredictArgs,
    TrainArgs,
};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenMinworld(a) => gen_minworld_cmd(a),
        Command::GenLinetracer(a) => gen_linetracer_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::DumpGu(a) => dump_gu_cmd(a),
    }
}

fn settings(keys: &'static [KeySpec], common: &Common) -> Result<Settings> {
    let mut s = Settings::new(keys);
    if let Some(path) = &common.config {
        s.apply_file(path)?;
    }
    Ok(s)
}

fn echo(name: &str, s: &Settings) {
    println!("# afa {name}");
    print!("{s}");
    println!("#");
}

fn path(s: &Settings, key: &str) -> Result<PathBuf> {
    s.require(key).map(PathBuf::from)
}

fn dataset(s: &Settings) -> Result<Dataset> {
    Ok(read_dataset(path(s, "data")?)?)
}

fn model(s: &Settings) -> Result<Network<f32>> {
    Ok(load_checkpoint(path(s, "model")?)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
}

const GEN_MINWORLD_KEYS: &[KeySpec] = &[
    ("out", None),
    ("height", Some("8")),
    ("width", Some("12")),
    ("steps", Some("12")),
    ("directions", Some("right,down")),
];

fn gen_minworld_cmd(a: GenMinworldArgs) -> Result<()> {
    let mut s = settings(GEN_MINWORLD_KEYS, &a.common)?;
    s.flag("out", a.out.map(|p| p.display().to_string()));
    s.flag("height", a.height);
    s.flag("width", a.width);
    s.flag("steps", a.steps);
    s.flag("directions", a.directions);
    echo("gen-minworld", &s);

    let out = path(&s, "out")?;
    let (h, w, steps): (usize, usize, usize) = (s.parse("height")?, s.parse("width")?, s.parse("steps")?);
    if h == 0 || w == 0 || steps == 0 {
        return Err(CliError::Usage("height, width and steps must be positive".into()));
    }
    let dirs = s
        .require("directions")?
        .split(',')
        .map(|d| match d.trim() {
            "right" => Ok(Direction::Right),
            "down" => Ok(Direction::Down),
            other => Err(CliError::Usage(format!("unknown direction {other:?} (expected right or down)"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = gen_minworld(h, w, steps, &dirs);
    write_dataset(&out, &ds)?;
    println!("wrote {} sequences of {steps} frames to {}", ds.sequences.len(), out.display());
    Ok(())
}

const GEN_LINETRACER_KEYS: &[KeySpec] = &[
    ("out", None),
    ("steps", Some("5000")),
    ("sequence_len", Some("20")),
    ("rows", Some("8")),
    ("cols", Some("12")),
    ("speed", Some("0.25")),
    ("gain", Some("200")),
    ("noise", Some("4")),
    ("seed", Some("0")),
];

fn gen_linetracer_cmd(a: GenLinetracerArgs) -> Result<()> {
    let mut s = settings(GEN_LINETRACER_KEYS, &a.common)?;
    s.flag("out", a.out.map(|p| p.display().to_string()));
    s.flag("steps", a.steps);
    s.flag("sequence_len", a.sequence_len);
    s.flag("rows", a.rows);
    s.flag("cols", a.cols);
    s.flag("speed", a.speed);
    s.flag("gain", a.gain);
    s.flag("noise", a.noise);
    s.seed(a.seed);
    echo("gen-linetracer", &s);

    let out = path(&s, "out")?;
    let cfg = TracerConfig {
        steps: s.parse("steps")?,
        sequence_len: s.parse("sequence_len")?,
        rows: s.parse("rows")?,
        cols: s.parse("cols")?,
        speed: s.parse("speed")?,
        gain: s.parse("gain")?,
        noise: s.parse("noise")?,
        seed: s.parse("seed")?,
        ..TracerConfig::default()
    };
    let ds = sim_linetracer(&cfg)?;
    write_dataset(&out, &ds)?;
    println!("wrote {} sequences of {} frames to {}", ds.sequences.len(), cfg.sequence_len, out.display());
    Ok(())
}

const TRAIN_KEYS: &[KeySpec] = &[
    ("data", None),
    ("out", Some("model.afac")),
    ("resume", None),
    ("layers", Some("2")),
    ("gu", Some("2")),
    ("mlp_hidden", Some("4")),
    ("r_channels", None),
    ("target_channels", None),
    ("padding_mode", Some("zeros")),
    ("lr", Some("0.001")),
    ("iters", Some("100000")),
    ("threshold", None),
    ("layer_weights", Some("1,0.1")),
    ("time_weights", Some("0")),
    ("error_norm", Some("mean")),
    ("beta1", Some("0.9")),
    ("beta2", Some("0.999")),
    ("epsilon", Some("1e-8")),
    ("prediction_slope", Some("0")),
    ("log_every", Some("1000")),
    ("loss_log", None),
    ("seed", Some("0")),
];

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn network_config(s: &Settings, ds: &Dataset) -> Result<NetworkConfig> {
    let mut cfg = NetworkConfig::new(s.parse("layers")?, ds.height, ds.width, ds.channels, ds.action_dim)
        .with_units(s.parse("gu")?);
    cfg.mlp_hidden = s.parse("mlp_hidden")?;
    if let Some(v) = s.list("r_channels")? {
        cfg.r_channels = v;
    }
    if let Some(v) = s.list("target_channels")? {
        cfg.target_channels = v;
    }
    let mode = s.require("padding_mode")?;
    cfg.padding.mode =
        PaddingMode::parse(mode).ok_or_else(|| CliError::Usage(format!("padding_mode: expected zeros or circular, got {mode:?}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(s: &Settings) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for key in ["lr", "iters", "threshold", "layer_weights", "time_weights", "error_norm", "beta1", "beta2", "epsilon", "prediction_slope", "seed"] {
        if let Some(v) = s.get(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut s = settings(TRAIN_KEYS, &a.common)?;
    let show = |p: Option<PathBuf>| p.map(|p| p.display().to_string());
    s.flag("data", show(a.data));
    s.flag("out", show(a.out));
    s.flag("resume", show(a.resume));
    s.flag("layers", a.layers);
    s.flag("gu", a.gu);
    s.flag("mlp_hidden", a.mlp_hidden);
    s.flag("r_channels", a.r_channels);
    s.flag("target_channels", a.target_channels);
    s.flag("padding_mode", a.padding_mode);
    s.flag("lr", a.lr);
    s.flag("iters", a.iters);
    s.flag("threshold", a.threshold);
    s.flag("layer_weights", a.layer_weights);
    s.flag("time_weights", a.time_weights);
    s.flag("error_norm", a.error_norm);
    s.flag("beta1", a.beta1);
    s.flag("beta2", a.beta2);
    s.flag("epsilon", a.epsilon);
    s.flag("prediction_slope", a.prediction_slope);
    s.flag("log_every", a.log_every);
    s.flag("loss_log", show(a.loss_log));
    s.seed(a.seed);

    let ds = dataset(&s)?;
    let tc = train_config(&s)?;
    let mut trainer = match s.get("resume") {
        Some(p) => {
            let net = load_checkpoint(p)?;
            for (k, v) in [("layers", net.config.layers.to_string()), ("mlp_hidden", net.config.mlp_hidden.to_string())] {
                s.flag(k, Some(v));
            }
            s.flag("gu", net.config.gu_units.first());
            s.flag("padding_mode", Some(net.config.padding.mode.name()));
            s.flag("r_channels", Some(join(&net.config.r_channels)));
            s.flag("target_channels", Some(join(&net.config.target_channels)));
            Trainer::resume(&ds, net, tc)?
        }
        None => {
            let nc = network_config(&s, &ds)?;
            s.fill("r_channels", join(&nc.r_channels));
            s.fill("target_channels", join(&nc.target_channels));
            Trainer::new(&ds, nc, tc)?
        }
    };
    echo("train", &s);
    let out = path(&s, "out")?;
    let log_every: usize = s.parse("log_every")?;
    println!(
        "{} sequences, {} parameters",
        ds.sequences.len(),
        trainer.network().params.num_scalars()
    );

    let mut window = 0.0f64;
    let stop = trainer.run(|it, loss| {
        window += loss as f64;
        if log_every > 0 && it % log_every == 0 {
            println!("iter {it}\tloss {:.6e}", window / log_every as f64);
            window = 0.0;
        }
    })?;
    let iters = trainer.iteration();
    let outcome = trainer.finish(stop);
    save_checkpoint(&out, &outcome.checkpoint)?;
    if let Some(p) = s.get("loss_log") {
        let mut text = String::from("iter\tloss\n");
        for (i, l) in outcome.losses.iter().enumerate() {
            text.push_str(&format!("{}\t{l}\n", i + 1));
        }
        write_text(Path::new(p), &text)?;
    }
    let why = match outcome.stop {
        StopReason::Threshold => "loss threshold reached",
        StopReason::MaxIterations => "iteration budget spent",
    };
    println!("stopped after {iters} iterations ({why}); wrote {}", out.display());
    Ok(())
}

const PREDICT_KEYS: &[KeySpec] = &[("model", None), ("data", None), ("out_dir", None)];

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let mut s = settings(PREDICT_KEYS, &a.common)?;
    s.flag("model", a.model.map(|p| p.display().to_string()));
    s.flag("data", a.data.map(|p| p.display().to_string()));
    s.flag("out_dir", a.out_dir.map(|p| p.display().to_string()));
    echo("predict", &s);

    let net = model(&s)?;
    let ds = dataset(&s)?;
    let dir = path(&s, "out_dir")?;
    create_dir(&dir)?;
    let (c, h, w) = (ds.channels, ds.height, ds.width);
    let mut files = 0;
    for (i, seq) in ds.sequences.iter().enumerate() {
        let roll = net.rollout(seq)?;
        for (t, p) in roll.predictions.iter().enumerate() {
            for (ci, ch) in p.data().chunks(h * w).enumerate() {
                let name = if c == 1 { format!("seq{i:04}_t{t:03}.pgm") } else { format!("seq{i:04}_t{t:03}_ch{ci:02}.pgm") };
                export_pgm(&Tensor::new(&[h, w], ch.to_vec())?, dir.join(name))?;
                files += 1;
            }
        }
    }
    println!("wrote {files} images to {}", dir.display());
    Ok(())
}

const EVAL_KEYS: &[KeySpec] =
    &[("model", None), ("data", None), ("report", None), ("accuracy_from", None), ("probe", None), ("uniform", None)];

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let mut s = settings(EVAL_KEYS, &a.common)?;
    s.flag("model", a.model.map(|p| p.display().to_string()));
    s.flag("data", a.data.map(|p| p.display().to_string()));
    s.flag("report", a.report.map(|p| p.display().to_string()));
    s.flag("accuracy_from", a.accuracy_from);
    s.flag_bool("probe", a.probe);
    s.flag_bool("uniform", a.uniform);
    echo("eval", &s);

    let mut net = model(&s)?;
    if s.bool("uniform")? {
        net = uniform_attention(&net);
    }
    let ds = dataset(&s)?;
    let mut report = eval_mse(&net, &ds)?;
    let mut extra = String::new();
    if s.bool("probe")? {
        let p = action_swap_probe(&net, &ds)?;
        report.swap_accuracy = Some(p.accuracy);
        extra.push_str(&format!(
            "probe_states\t{}\nswap_right_accuracy\t{:.4}\nswap_down_accuracy\t{:.4}\nswap_differing\t{:.4}\n",
            p.states, p.right_accuracy, p.down_accuracy, p.differing
        ));
    }
    if let Some(from) = s.parse_opt::<usize>("accuracy_from")? {
        extra.push_str(&format!("accuracy\t{:.4}\n", next_frame_accuracy(&net, &ds, from)?));
    }
    print!("{report}{extra}");
    if let Some(p) = s.get("report") {
        let mut text = String::from("sequence\tmse\tbaseline_mse\n");
        for (i, (m, b)) in report.per_sequence_mse.iter().zip(&report.per_sequence_baseline).enumerate() {
            text.push_str(&format!("{i}\t{m:.6e}\t{b:.6e}\n"));
        }
        write_text(Path::new(p), &text)?;
    }
    Ok(())
}

const GRADCHECK_KEYS: &[KeySpec] = &[
    ("layers", Some("1")),
    ("height", Some("4")),
    ("width", Some("4")),
    ("steps", Some("3")),
    ("gu", Some("2")),
    ("eps", Some("1e-5")),
    ("tol", Some("1e-4")),
    ("samples", Some("12")),
    ("seed", Some("0")),
];

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let mut s = settings(GRADCHECK_KEYS, &a.common)?;
    s.flag("layers", a.layers);
    s.flag("height", a.height);
    s.flag("width", a.width);
    s.flag("steps", a.steps);
    s.flag("gu", a.gu);
    s.flag("eps", a.eps);
    s.flag("tol", a.tol);
    s.flag("samples", a.samples);
    s.seed(a.seed);
    echo("gradcheck", &s);

    let cfg = NetworkConfig::new(s.parse("layers")?, s.parse("height")?, s.parse("width")?, 1, 2).with_units(s.parse("gu")?);
    let samples: usize = s.parse("samples")?;
    let opts = GradCheckOptions {
        steps: s.parse("steps")?,
        seed: s.parse("seed")?,
        samples_per_tensor: (samples > 0).then_some(samples),
        ..GradCheckOptions::new(s.parse("eps")?, s.parse("tol")?)
    };
    let report = gradient_check_with(&cfg, &opts)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("gradient check failed for {}", report.failures().join(", "))))
    }
}

const DUMP_GU_KEYS: &[KeySpec] =
    &[("model", None), ("data", None), ("sequence", Some("0")), ("layer", Some("0")), ("out_dir", None)];

fn dump_gu_cmd(a: DumpGuArgs) -> Result<()> {
    let mut s = settings(DUMP_GU_KEYS, &a.common)?;
    s.flag("model", a.model.map(|p| p.display().to_string()));
    s.flag("data", a.data.map(|p| p.display().to_string()));
    s.flag("sequence", a.sequence);
    s.flag("layer", a.layer);
    s.flag("out_dir", a.out_dir.map(|p| p.display().to_string()));
    echo("dump-gu", &s);

    let net = model(&s)?;
    let ds = dataset(&s)?;
    let dir = path(&s, "out_dir")?;
    let idx: usize = s.parse("sequence")?;
    let seq = ds
        .sequences
        .get(idx)
        .ok_or_else(|| CliError::Usage(format!("sequence {idx} out of range ({} sequences)", ds.sequences.len())))?;
    let steps = dump_gu(&net, seq, s.parse("layer")?)?;
    let files = write_gu_dump(&steps, &dir)?;
    println!("wrote {files} files for {} steps to {}", steps.len(), dir.display());
    Ok(())
}
