use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use intrus::analysis::{order_direction_profile, read_decodes, relative_order_stats};
use intrus::inference::{bench_decode, decode_all, AnyModel, BenchRow, DecodeConfig};
use intrus::model::{BaselineModel, InsertionModel};
use intrus::tasks::{corpus_bleu, generate_range, read_tsv, sequence_accuracy, write_tsv, Pair, TaskSpec, Vocab};
use intrus::training::{train as run_training, RunOutput};
use intrus::trajectory::TokenId;
use intrus::verify::run_suite;
use serde_json::{Map, Value};

use crate::config::resolve;
use crate::{AnalyzeArgs, BenchArgs, DecodeArgs, EvalArgs, GenDataArgs, PropertyFailure, TrainArgs, VerifyArgs};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "config.json";
const VALID_OFFSET: u64 = 1 << 40;
const TEST_OFFSET: u64 = 2 << 40;

fn generate_parallel(spec: &TaskSpec, start: u64, n: usize, workers: usize) -> Vec<Pair> {
    let workers = workers.clamp(1, n.max(1));
    let chunk = n.div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|i| s.spawn(move || generate_range(spec, start + i as u64, chunk.min(n - i))))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("generator panicked"))
            .collect()
    })
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.n == 0 {
        bail!("--n must be at least 1");
    }
    if a.vocab_size == 0 || a.min_len == 0 || a.min_len > a.max_len {
        bail!("need vocab-size >= 1 and 1 <= min-len <= max-len");
    }
    let spec = TaskSpec::new(a.task, a.vocab_size, a.min_len, a.max_len, a.seed);
    let vocab = spec.vocab();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    vocab.write(&a.out.join(VOCAB_FILE))?;
    for (name, start, n) in [
        ("train", 0, a.n),
        ("valid", VALID_OFFSET, a.valid),
        ("test", TEST_OFFSET, a.test),
    ] {
        let pairs = generate_parallel(&spec, start, n, a.workers);
        write_tsv(&a.out.join(format!("{name}.tsv")), &pairs, &vocab)?;
    }
    println!(
        "wrote {} train, {} valid, {} test pairs to {}",
        a.n,
        a.valid,
        a.test,
        a.out.display()
    );
    Ok(())
}

fn flag_overrides(a: &TrainArgs) -> Map<String, Value> {
    let mut m = Map::new();
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            m.insert(k.to_string(), v);
        }
    };
    put("mode", a.mode.map(|x| Value::String(x.name().into())));
    put("steps", a.steps.map(Value::from));
    put("pretrain_steps", a.pretrain_steps.map(Value::from));
    put("base_lr", a.base_lr.map(Value::from));
    put("warmup_steps", a.warmup_steps.map(Value::from));
    put("batch_tokens", a.batch_tokens.map(Value::from));
    put("beam_for_argmax", a.beam_for_argmax.map(Value::from));
    put("seed", a.seed.map(Value::from));
    put("clip_norm", a.clip_norm.map(Value::from));
    put("eval_every", a.eval_every.map(Value::from));
    put("checkpoint_every", a.checkpoint_every.map(Value::from));
    put("target_accuracy", a.target_accuracy.map(Value::from));
    put("max_eval", a.max_eval.map(Value::from));
    put("d_model", a.d_model.map(Value::from));
    put("num_heads", a.num_heads.map(Value::from));
    put("num_encoder_layers", a.num_encoder_layers.map(Value::from));
    put("num_decoder_layers", a.num_decoder_layers.map(Value::from));
    put("ffn_dim", a.ffn_dim.map(Value::from));
    put("max_len", a.max_len.map(Value::from));
    put("dropout", a.dropout.map(Value::from));
    m
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve(a.preset.as_deref(), a.config.as_deref(), flag_overrides(a))?;
    let vocab = Vocab::read(&a.data.join(VOCAB_FILE))?;
    let train_set = read_tsv(&a.data.join("train.tsv"), &vocab)?;
    let valid_path = a.data.join("valid.tsv");
    let valid = if valid_path.exists() {
        read_tsv(&valid_path, &vocab)?
    } else {
        Vec::new()
    };

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join(CONFIG_FILE), serde_json::to_string_pretty(&cfg)? + "\n")?;
    vocab.write(&a.out.join(VOCAB_FILE))?;

    let model_cfg = cfg.model_config(vocab.len());
    let mut model = if cfg.mode.is_baseline() {
        AnyModel::Baseline(BaselineModel::new(model_cfg, cfg.seed)?)
    } else {
        AnyModel::Insertion(InsertionModel::new(model_cfg, cfg.seed)?)
    };
    let mut out = RunOutput::create(&a.out)?;
    let s = run_training(&mut model, &train_set, &valid, &cfg.train_config(), Some(&mut out))?;
    println!(
        "mode {} steps {} valid accuracy {:.4} bleu {:.2}",
        cfg.mode, s.steps, s.final_accuracy, s.final_bleu
    );
    Ok(())
}

/// Sources of a TSV pair file, or of a file with one source per line.
fn read_sources(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<TokenId>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let src = l.split('\t').next().unwrap_or("");
            vocab
                .encode(src)
                .map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), i + 1))
        })
        .collect()
}

fn vocab_for(explicit: Option<&Path>, ckpt: &Path) -> Result<Vocab> {
    let path: PathBuf = match explicit {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE),
    };
    Vocab::read(&path).with_context(|| format!("vocabulary {}", path.display()))
}

pub fn decode(a: &DecodeArgs) -> Result<()> {
    if a.beam == 0 {
        bail!("--beam must be at least 1");
    }
    let model = AnyModel::load(&a.ckpt)?;
    let vocab = vocab_for(a.vocab.as_deref(), &a.ckpt)?;
    let sources = read_sources(&a.data, &vocab)?;
    let mut cfg = DecodeConfig::new(a.beam, a.max_steps.unwrap_or(2 * model.config().max_len));
    cfg.length_norm = a.length_norm;
    let decoded = decode_all(&model, &sources, &cfg, a.workers)?;
    let mut text = String::new();
    for d in &decoded {
        text.push_str(&d.to_line(&vocab));
        text.push('\n');
    }
    fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
    let truncated = decoded.iter().filter(|d| d.truncated).count();
    println!("decoded {} sources ({truncated} truncated)", decoded.len());
    Ok(())
}

fn read_field(path: &Path, pick: impl Fn(&[&str]) -> String) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| {
            let fields: Vec<&str> = l.split('\t').collect();
            pick(&fields).split_whitespace().map(str::to_string).collect()
        })
        .collect())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let hyps = read_field(&a.hyp, |f| f[0].to_string())?;
    let refs = read_field(&a.reference, |f| if f.len() == 2 { f[1] } else { f[0] }.to_string())?;
    if hyps.len() != refs.len() {
        bail!("{} hypotheses but {} references", hyps.len(), refs.len());
    }
    println!("sequence_accuracy {:.6}", sequence_accuracy(&hyps, &refs));
    println!("bleu {:.4}", corpus_bleu(&hyps, &refs, 4));
    Ok(())
}

pub fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let vocab = Vocab::read(&a.vocab)?;
    let text = fs::read_to_string(&a.decodes).with_context(|| format!("reading {}", a.decodes.display()))?;
    let decodes = read_decodes(&text, &vocab)?;
    let stats = relative_order_stats(&decodes.trajectories, &vocab)?;
    let dirs = order_direction_profile(&decodes.trajectories);
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("order_histogram.csv"), stats.histogram_csv())?;
    fs::write(a.out.join("order_summary.csv"), stats.summary_csv())?;
    fs::write(a.out.join("directions.csv"), dirs.to_csv())?;
    print!("{}", stats.summary_csv());
    println!(
        "directions l2r {} r2l {} mixed {} (skipped {} truncated)",
        dirs.l2r, dirs.r2l, dirs.mixed, decodes.truncated
    );
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let AnyModel::Insertion(ins) = AnyModel::load(&a.ckpt_intrus)? else {
        bail!("{} is not an insertion checkpoint", a.ckpt_intrus.display());
    };
    let AnyModel::Baseline(base) = AnyModel::load(&a.ckpt_baseline)? else {
        bail!("{} is not a baseline checkpoint", a.ckpt_baseline.display());
    };
    let vocab = vocab_for(a.vocab.as_deref(), &a.ckpt_intrus)?;
    let mut sources = read_sources(&a.data, &vocab)?;
    sources.truncate(a.n);
    if sources.is_empty() {
        bail!("no sources in {}", a.data.display());
    }
    let (rows, summary) = bench_decode(&ins, &base, &sources, &a.lengths, a.beam)?;
    let mut csv = String::from(BenchRow::CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.to_csv());
        csv.push('\n');
    }
    match &a.out {
        Some(p) => fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    eprintln!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

pub fn verify(a: &VerifyArgs) -> Result<()> {
    let checks = run_suite(a.suite);
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(PropertyFailure(failed).into());
    }
    Ok(())
}
