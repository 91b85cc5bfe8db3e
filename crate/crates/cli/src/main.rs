//! `prosody-flow`: corpus generation, training, synthesis, prosody control,
//! evaluation and the oracle self-test.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use prosody_flow::control::{synthesize_with_control, ControlOptions, ControlledSynthesis, Edit};
use prosody_flow::corpus::{
    generate_toy_corpus, load_corpus, load_lexicon, strip_punctuation, write_tensor, Lexicon, Utterance, N_SPEAKERS,
};
use prosody_flow::evaluation::{evaluate, EvalOptions};
use prosody_flow::model::ProsodyModel;
use prosody_flow::selftest;
use prosody_flow::training::{load_checkpoint, load_model, TrainConfig, TrainState, FINAL_CHECKPOINT, LOSS_LOG_FILE};

const DEFAULT_CORPUS: &str = "corpus/manifest.jsonl";
const DEFAULT_CHECKPOINT: &str = "runs/default/final.ckpt";

#[derive(Parser, Debug)]
#[command(
    name = "prosody-flow",
    version,
    about = "Prosody-aware flow-matching TTS on a synthetic corpus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Seed for training, ODE noise and corpus generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training step budget.
    #[arg(long, global = true)]
    steps: Option<u64>,
    /// Euler steps for ODE decoding.
    #[arg(long = "n-ode-steps", global = true)]
    n_ode_steps: Option<usize>,
    /// Output path (file or directory, per subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic pseudo-speech corpus.
    GenerateCorpus {
        #[arg(long, default_value_t = 8)]
        n_utts: usize,
        #[arg(long, default_value_t = 12)]
        vocab_size: usize,
    },
    /// Train a model; `--set key=value` and the global flags override the config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Extra `key=value` overrides.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print the effective configuration and exit.
        #[arg(long)]
        show_config: bool,
    },
    /// Synthesize mel tensors for target texts with a reference utterance's intonation.
    Synth {
        #[arg(long, required = true)]
        text: Vec<String>,
        #[arg(long = "ref")]
        reference: String,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Synthesize with intonation and phrase-break edits.
    Control {
        #[arg(long = "ref")]
        reference: String,
        /// Target text; defaults to the reference transcript.
        #[arg(long)]
        text: Option<String>,
        /// Terminal slope for a phrase-final word, as index or word: `WORD=K`.
        #[arg(long, value_name = "WORD=K")]
        slope: Vec<String>,
        /// Insert a break after this word index.
        #[arg(long, value_name = "IDX")]
        add_break: Vec<usize>,
        /// Remove the break after this word index.
        #[arg(long, value_name = "IDX")]
        remove_break: Vec<usize>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Objective evaluation by parallel resynthesis of a corpus.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the oracle suite and print pass/fail per check.
    Selftest {
        /// Also run the training-based checks (minutes).
        #[arg(long)]
        full: bool,
    },
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, default_value = DEFAULT_CORPUS)]
    corpus: PathBuf,
    #[arg(long, default_value = DEFAULT_CHECKPOINT)]
    checkpoint: PathBuf,
}

impl ModelArgs {
    fn load(&self) -> Result<(ProsodyModel, Lexicon, Vec<Utterance>)> {
        let model = load_model(&self.checkpoint).with_context(|| format!("loading {}", self.checkpoint.display()))?;
        let lexicon = load_lexicon(&self.corpus)?;
        let utts = load_corpus(&self.corpus)?;
        Ok((model, lexicon, utts))
    }
}

fn find_utterance<'a>(utts: &'a [Utterance], id: &str) -> Result<&'a Utterance> {
    utts.iter()
        .find(|u| u.id == id)
        .ok_or_else(|| anyhow!("no utterance {id:?} in the corpus"))
}

fn control_options(g: &Global) -> ControlOptions {
    let d = ControlOptions::default();
    ControlOptions {
        n_steps: g.n_ode_steps.unwrap_or(d.n_steps),
        seed: g.seed.unwrap_or(d.seed),
    }
}

fn write_mel(path: &Path, out: &ControlledSynthesis) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_tensor(path, &out.synthesis.mel.data)?;
    println!(
        "{}: {} frames, breaks after {:?}",
        path.display(),
        out.synthesis.mel.frames(),
        out.breaks.indices()
    );
    Ok(())
}

/// `WORD=K` where WORD is a word index or a (punctuation-insensitive) word.
fn parse_slope(spec: &str, words: &[String]) -> Result<Edit> {
    let (w, k) = spec
        .rsplit_once('=')
        .ok_or_else(|| anyhow!("--slope expects WORD=K, got {spec:?}"))?;
    let k: f64 = k
        .trim()
        .parse()
        .with_context(|| format!("bad slope value in {spec:?}"))?;
    let word = match w.trim().parse::<usize>() {
        Ok(i) => i,
        Err(_) => words
            .iter()
            .rposition(|x| strip_punctuation(x).eq_ignore_ascii_case(strip_punctuation(w.trim())))
            .ok_or_else(|| anyhow!("word {w:?} not in the reference transcript"))?,
    };
    Ok(Edit::Slope { word, k })
}

fn cmd_generate(g: &Global, n_utts: usize, vocab_size: usize) -> Result<()> {
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("corpus"));
    let manifest = generate_toy_corpus(&dir, n_utts, vocab_size, g.seed.unwrap_or(0))?;
    println!(
        "wrote {} utterances to {}",
        manifest.entries.len(),
        manifest.path.display()
    );
    Ok(())
}

fn cmd_train(
    g: &Global,
    config: Option<&Path>,
    corpus: Option<&Path>,
    overrides: &[String],
    resume: Option<&Path>,
    show: bool,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {o:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(c) = corpus {
        cfg.corpus = c.to_path_buf();
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(s) = g.steps {
        cfg.max_steps = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    if show {
        print!("{}", cfg.show());
        return Ok(());
    }
    let lexicon = load_lexicon(&cfg.corpus)?;
    let utts = load_corpus(&cfg.corpus)?;
    let mut state = match resume {
        Some(p) => {
            let mut st = load_checkpoint(p)?;
            // Only the schedule length may change on resume.
            st.config.max_steps = cfg.max_steps;
            st.config.epochs = cfg.epochs;
            st.config.out_dir = cfg.out_dir.clone();
            st
        }
        None => {
            let speakers = utts.iter().map(|u| u.speaker_id + 1).max().unwrap_or(0).max(N_SPEAKERS);
            TrainState::for_corpus(cfg.clone(), &lexicon, speakers)?
        }
    };
    let planned = state.planned_steps(utts.len());
    log::info!(
        "training {} steps from step {} on {} utterances",
        planned,
        state.step,
        utts.len()
    );
    let out_dir = state.config.out_dir.clone();
    let reports = state.fit(&utts, Some(&out_dir))?;
    match reports.last() {
        Some(r) => println!(
            "step {}: total {:.4} (cfm {:.4}, prior {:.4}, dur {:.4}, tp_align {:.4})",
            r.step, r.total, r.losses.cfm, r.losses.prior, r.losses.dur, r.losses.tp_align
        ),
        None => println!("nothing to do: already at step {}", state.step),
    }
    println!(
        "loss log {}, checkpoint {}",
        out_dir.join(LOSS_LOG_FILE).display(),
        out_dir.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn cmd_synth(g: &Global, texts: &[String], reference: &str, m: &ModelArgs) -> Result<()> {
    let (model, lexicon, utts) = m.load()?;
    let utt = find_utterance(&utts, reference)?;
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("synth"));
    for (i, text) in texts.iter().enumerate() {
        let s = synthesize_with_control(&model, &lexicon, text, utt, &[], control_options(g))?;
        let path = if texts.len() == 1 && out.extension().is_some() {
            out.clone()
        } else {
            out.join(format!("synth_{i:03}.pfm"))
        };
        write_mel(&path, &s)?;
    }
    Ok(())
}

fn cmd_control(
    g: &Global,
    reference: &str,
    text: Option<&str>,
    slopes: &[String],
    add: &[usize],
    remove: &[usize],
    m: &ModelArgs,
) -> Result<()> {
    let (model, lexicon, utts) = m.load()?;
    let utt = find_utterance(&utts, reference)?;
    let mut edits = Vec::new();
    edits.extend(remove.iter().map(|&w| Edit::RemoveBreak(w)));
    edits.extend(add.iter().map(|&w| Edit::AddBreak(w)));
    for s in slopes {
        edits.push(parse_slope(s, &utt.words)?);
    }
    let text = text.map_or_else(|| utt.text(), str::to_owned);
    let out = synthesize_with_control(&model, &lexicon, &text, utt, &edits, control_options(g))?;
    write_mel(&g.out.clone().unwrap_or_else(|| PathBuf::from("control.pfm")), &out)
}

fn cmd_eval(g: &Global, m: &ModelArgs, report: Option<&Path>) -> Result<()> {
    let (model, lexicon, utts) = m.load()?;
    let d = EvalOptions::default();
    let opts = EvalOptions {
        n_steps: g.n_ode_steps.unwrap_or(d.n_steps),
        seed: g.seed.unwrap_or(d.seed),
    };
    let r = evaluate(&model, &lexicon, &utts, opts)?;
    let path = report
        .map(Path::to_path_buf)
        .or_else(|| g.out.clone())
        .unwrap_or_else(|| PathBuf::from("report.json"));
    r.write_json(&path)?;
    match r.rmse_f0 {
        Some(v) => println!("rmse_f0 {v:.4}"),
        None => println!("rmse_f0 undefined"),
    }
    println!(
        "break P {:.3} R {:.3} F1 {:.3}; wer {:.4}; report {}",
        r.break_f1.precision,
        r.break_f1.recall,
        r.break_f1.f1,
        r.wer,
        path.display()
    );
    Ok(())
}

fn cmd_selftest(g: &Global, full: bool) -> Result<()> {
    let mut checks = selftest::run_fast(g.seed.unwrap_or(0));
    if full {
        checks.extend(selftest::run_training(g.steps.unwrap_or(500)));
    }
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    if failed > 0 {
        bail!("{failed} self-test checks failed");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::GenerateCorpus { n_utts, vocab_size } => cmd_generate(g, *n_utts, *vocab_size),
        Command::Train {
            config,
            corpus,
            overrides,
            resume,
            show_config,
        } => cmd_train(
            g,
            config.as_deref(),
            corpus.as_deref(),
            overrides,
            resume.as_deref(),
            *show_config,
        ),
        Command::Synth { text, reference, model } => cmd_synth(g, text, reference, model),
        Command::Control {
            reference,
            text,
            slope,
            add_break,
            remove_break,
            model,
        } => cmd_control(g, reference, text.as_deref(), slope, add_break, remove_break, model),
        Command::Eval { model, report } => cmd_eval(g, model, report.as_deref()),
        Command::Selftest { full } => cmd_selftest(g, *full),
    }
}

/// The error chain, skipping causes already spelled out by an outer message.
fn error_message(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg = format!("{msg}: {c}");
        }
    }
    msg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", error_message(&e));
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_spec_by_index_or_word() {
        let words: Vec<String> = ["a", "dog,", "ran."].iter().map(|s| s.to_string()).collect();
        assert_eq!(parse_slope("1=2.5", &words).unwrap(), Edit::Slope { word: 1, k: 2.5 });
        assert_eq!(parse_slope("dog=-4", &words).unwrap(), Edit::Slope { word: 1, k: -4.0 });
        assert!(parse_slope("cat=1", &words).is_err());
        assert!(parse_slope("dog", &words).is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
