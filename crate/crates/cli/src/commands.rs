use std::io::{BufRead, Write};
use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};

use dialogue_core::data::{
    build_examples, build_vocab, generate_copy_ablation, generate_toy_corpus, load_corpus, load_embeddings, Corpus,
};
use dialogue_core::dialogue::db::{load_db, load_ontology};
use dialogue_core::dialogue::{run_turn, DialogueModel, Session};
use dialogue_core::eval::{evaluate, EvalOptions, SlotAggregation};
use dialogue_core::exec::ExecMode;
use dialogue_core::model::{Model, ModelConfig};
use dialogue_core::numerics::gradcheck::elementary_suite;
use dialogue_core::train::{fit, gradcheck, load_checkpoint, DevSet, FitOptions, Trainer};
use dialogue_service::{AppState, Limits};

use crate::camrest;
use crate::config::Settings;

/// Writes through a temporary sibling so readers never see partial files.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn existing(path: PathBuf, what: &str, flag: &str) -> Result<PathBuf> {
    if !path.exists() {
        bail!("{what} {} not found (set --{flag})", path.display());
    }
    Ok(path)
}

pub fn train(s: &Settings, dev: Option<PathBuf>, resume: Option<PathBuf>) -> Result<()> {
    let corpus_path = existing(s.paths.corpus_for("train"), "training corpus", "corpus")?;
    let db = load_db(&existing(s.paths.db(), "database", "db")?)?;
    let ontology = load_ontology(&existing(s.paths.ontology(), "ontology", "ontology")?)?;
    let corpus = load_corpus(&corpus_path)?;

    let mut trainer = if let Some(path) = resume {
        let (ckpt, sum) = load_checkpoint(&path)?;
        log::info!("resuming {} ({sum}) at step {}", path.display(), ckpt.counters.step);
        let examples = build_examples(&corpus, &ckpt.vocab, &db, &ontology, ckpt.model_config.max_positions)?;
        Trainer::resume(ckpt, examples, ExecMode::Parallel)?
    } else {
        let vocab = build_vocab(&corpus, Some(&ontology), 1);
        let config = ModelConfig {
            vocab_size: vocab.len(),
            ..s.model.clone()
        };
        for field in config.off_grid() {
            log::warn!("model.{field} is outside the published search grid");
        }
        let mut model = Model::new(config, s.train.seed)?;
        if let Some(path) = &s.paths.embeddings {
            let e = load_embeddings(path, &vocab, model.config().d_model, s.train.seed)?;
            log::info!("embeddings cover {:.1}% of the vocabulary", 100.0 * e.coverage);
            model.set_embeddings(e.table)?;
        }
        let examples = build_examples(&corpus, &vocab, &db, &ontology, model.config().max_positions)?;
        log::info!("{} dialogues, {} turns, vocabulary {}", corpus.dialogues.len(), examples.len(), vocab.len());
        Trainer::new(model, vocab, s.train.clone(), examples, ExecMode::Parallel)?
    };

    let dev_path = dev.or(s.paths.dev.clone()).or_else(|| {
        let p = s.paths.data_dir.join("dev.json");
        p.exists().then_some(p)
    });
    let dev_corpus = dev_path.as_deref().map(load_corpus).transpose()?;
    std::fs::create_dir_all(&s.paths.out_dir).with_context(|| format!("creating {}", s.paths.out_dir.display()))?;
    let summary = fit(
        &mut trainer,
        &FitOptions {
            dev: dev_corpus.as_ref().map(|corpus| DevSet {
                corpus,
                db: &db,
                ontology: &ontology,
                options: EvalOptions {
                    context_mode: s.eval.context_mode,
                    aggregation: s.eval.aggregation,
                    exec: ExecMode::Parallel,
                },
            }),
            out_dir: Some(s.paths.out_dir.clone()),
            stop_at_step: None,
        },
    )?;
    if let Some(last) = summary.history.last() {
        println!("{}", serde_json::to_string(last)?);
    }
    Ok(())
}

fn load_model(s: &Settings) -> Result<(DialogueModel, String)> {
    let path = s.paths.checkpoint()?;
    let (ckpt, sum) = load_checkpoint(path)?;
    log::info!("loaded {} ({sum})", path.display());
    Ok((DialogueModel::new(ckpt.model()?, ckpt.vocab)?, sum))
}

pub fn eval(s: &Settings, split: &str, per_turn: bool) -> Result<()> {
    let (model, _) = load_model(s)?;
    let corpus = load_corpus(&existing(s.paths.corpus_for(split), "corpus", "corpus")?)?;
    let db = load_db(&existing(s.paths.db(), "database", "db")?)?;
    let ontology = load_ontology(&existing(s.paths.ontology(), "ontology", "ontology")?)?;
    let options = EvalOptions {
        context_mode: s.eval.context_mode,
        aggregation: if per_turn { SlotAggregation::PerTurn } else { s.eval.aggregation },
        exec: ExecMode::Parallel,
    };
    let report = evaluate(&model, &corpus, &db, &ontology, &options)?;
    log::info!(
        "success F1 {:.4}, BLEU {:.4}, bspan exact match {:.4}",
        report.success_f1,
        report.bleu,
        report.bspan_exact_match
    );
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn chat(s: &Settings) -> Result<()> {
    let (model, _) = load_model(s)?;
    let db = load_db(&existing(s.paths.db(), "database", "db")?)?;
    let ontology = load_ontology(&existing(s.paths.ontology(), "ontology", "ontology")?)?;
    let mut session = Session::new("local");
    let stdin = std::io::stdin();
    let mut out = std::io::stdout();
    for line in stdin.lock().lines() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if text == "quit" || text == "exit" {
            break;
        }
        match run_turn(&mut session, text, &model, &db, &ontology) {
            Ok(r) => {
                writeln!(out, "system: {}", r.surface_response)?;
                writeln!(
                    out,
                    "  [bspan: {} | db: {} {}]",
                    r.bspan.tokens().join(" "),
                    r.db_matches,
                    r.db_token
                )?;
            }
            Err(e) => writeln!(out, "  [error: {e}]")?,
        }
        out.flush()?;
    }
    Ok(())
}

pub fn serve(s: &Settings) -> Result<()> {
    let checkpoint = s.paths.checkpoint()?;
    let limits = Limits {
        max_sessions: s.serve.max_sessions,
        idle_expiry: Duration::from_secs(s.serve.idle_expiry_secs),
    };
    let state = AppState::load(
        checkpoint,
        &existing(s.paths.db(), "database", "db")?,
        &existing(s.paths.ontology(), "ontology", "ontology")?,
        limits,
    )?;
    log::info!("model {} with vocabulary {}", state.checkpoint_id, state.vocab_size);
    let addr = SocketAddr::from((Ipv4Addr::UNSPECIFIED, s.serve.port));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(dialogue_service::serve(Arc::new(state), addr))?;
    Ok(())
}

fn write_corpus(dir: &Path, split: &str, corpus: &Corpus) -> Result<()> {
    write_atomic(&dir.join(format!("{split}.json")), &corpus.to_json()?)
}

pub fn gen_toy(s: &Settings, n: usize, copy_ablation: bool) -> Result<()> {
    let dir = &s.paths.data_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let seed = s.train.seed;
    let (db, ontology) = if copy_ablation {
        let split = generate_copy_ablation(seed, n)?;
        write_corpus(dir, "train", &split.train)?;
        write_corpus(dir, "test", &split.eval)?;
        write_atomic(&dir.join("held_out.json"), &serde_json::to_string_pretty(&split.held_out)?)?;
        println!(
            "{} train and {} test dialogues, held out {:?}",
            split.train.dialogues.len(),
            split.eval.dialogues.len(),
            split.held_out
        );
        (split.db, split.ontology)
    } else {
        let toy = generate_toy_corpus(seed, n)?;
        write_corpus(dir, "train", &toy.corpus)?;
        println!("{} dialogues", toy.corpus.dialogues.len());
        (toy.db, toy.ontology)
    };
    write_atomic(&dir.join("db.json"), &serde_json::to_string_pretty(&db)?)?;
    write_atomic(&dir.join("ontology.json"), &serde_json::to_string_pretty(&ontology)?)?;
    Ok(())
}

pub fn convert_camrest(s: &Settings, input: &Path, source_db: &Path, source_ontology: &Path) -> Result<()> {
    let read = |p: &Path| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    let converted = camrest::convert(&read(input)?, &read(source_db)?, &read(source_ontology)?)?;
    let dir = &s.paths.data_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (split, corpus) in &converted.splits {
        write_corpus(dir, split, corpus)?;
        println!("{split}: {} dialogues", corpus.dialogues.len());
    }
    write_atomic(&dir.join("db.json"), &serde_json::to_string_pretty(&converted.db)?)?;
    write_atomic(&dir.join("ontology.json"), &serde_json::to_string_pretty(&converted.ontology)?)?;
    Ok(())
}

pub fn gradcheck(s: &Settings) -> Result<()> {
    let mut failed = 0;
    let mut line = |name: &str, err: f64, checked: bool| {
        let ok = err <= gradcheck::TOLERANCE && checked;
        failed += usize::from(!ok);
        println!("{:<5} {name:<40} max rel error {err:.3e}", if ok { "PASS" } else { "FAIL" });
    };
    for c in elementary_suite(s.train.seed, gradcheck::EPS)? {
        line(&format!("op {}", c.op), c.max_error, true);
    }
    for copy in [true, false] {
        let config = ModelConfig {
            copy,
            ..s.model.clone()
        };
        let tag = if copy { "copy" } else { "no-copy" };
        for c in gradcheck::model_gradient_check(&config, s.train.seed, 4)? {
            line(&format!("{tag} {}", c.name), c.max_error, c.checked > 0);
        }
    }
    if failed > 0 {
        bail!("{failed} gradient checks exceeded {:e}", gradcheck::TOLERANCE);
    }
    Ok(())
}
