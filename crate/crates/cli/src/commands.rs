use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use scene_embed::cooccur::{accumulate, load_shards, save_shards};
use scene_embed::corpus::{self, ClassNames, SceneSentence, Vocabulary};
use scene_embed::embedding::{self, EmbeddingStore, PromptTemplate};
use scene_embed::eval;
use scene_embed::trainer::{self, Checkpoint, ModelParams, TrainConfig};
use scene_embed::{ClusterSpec, Error, Result};

use crate::config::{emit, FileConfig, VectorFormat};
use crate::{
    Cli, Command, CooccurArgs, MaskEvalArgs, PreprocessArgs, QueryArgs, QueryOp, SynthArgs, TrainArgs,
};

/// Copies every `Some` flag over the matching settings field.
macro_rules! override_with {
    ($settings:expr, $args:expr; $($field:ident),+ $(,)?) => {
        $(if let Some(v) = $args.$field.clone() {
            $settings.$field = v;
        })+
    };
}

pub fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Preprocess(a) => preprocess(a, file, cli.emit_config),
        Command::Cooccur(a) => cooccur(a, file, cli.emit_config),
        Command::Train(a) => train(a, file, cli.emit_config),
        Command::Query(a) => query(a, file, cli.emit_config),
        Command::MaskEval(a) => mask_eval(a, file, cli.emit_config),
        Command::Synth(a) => synth(a, file, cli.emit_config),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Fails early when an output's parent directory is missing.
fn check_outputs(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            if !parent.is_dir() {
                return Err(Error::io(
                    parent,
                    io::Error::new(io::ErrorKind::NotFound, "directory does not exist"),
                ));
            }
        }
    }
    Ok(())
}

fn check_inputs(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.exists() {
            return Err(Error::io(
                *p,
                io::Error::new(io::ErrorKind::NotFound, "no such file or directory"),
            ));
        }
    }
    Ok(())
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn read_sentences(path: &Path) -> Result<Vec<SceneSentence>> {
    corpus::read_sentences(open(path)?).map_err(|e| with_path(e, path))
}

fn read_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::read(open(path)?).map_err(|e| with_path(e, path))
}

/// Prefixes format errors with the file they came from.
fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { what, message } => Error::format(format!("{} ({what})", path.display()), message),
        other => other,
    }
}

fn preprocess(a: PreprocessArgs, file: FileConfig, emit_config: bool) -> Result<()> {
    let mut s = file.preprocess;
    override_with!(s, a; min_count, scan, col_image_id, col_label, col_x_min, col_x_max, col_y_min, col_y_max);
    s.skip_bad_rows |= a.skip_bad_rows;
    if emit_config {
        eprint!("{}", emit("preprocess", &s));
    }
    let mut inputs = vec![a.annotations.as_path()];
    inputs.extend(a.class_names.as_deref());
    check_inputs(&inputs)?;
    check_outputs(&[&a.out_sentences, &a.out_vocab])?;

    let names = match &a.class_names {
        Some(p) => Some(ClassNames::read(open(p)?).map_err(|e| with_path(e, p))?),
        None => None,
    };
    let context = a.annotations.display().to_string();
    let reader = corpus::parse_annotations(open(&a.annotations)?, &s.columns()).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{context}: {m}")),
        other => other,
    })?;
    let mut boxes = Vec::new();
    let mut skipped = 0u64;
    for row in reader {
        match row {
            Ok(b) => boxes.push(b),
            Err(row) if s.skip_bad_rows => {
                if skipped < 10 {
                    eprintln!("warning: {context}: {row}");
                }
                skipped += 1;
            }
            Err(row) => return Err(Error::Row { context, row }),
        }
    }
    if skipped > 0 {
        eprintln!("skipped {skipped} malformed rows");
    }

    let out = corpus::preprocess(boxes, names.as_ref(), s.scan, s.min_count)?;
    corpus::write_sentences(create(&a.out_sentences)?, &out.sentences).map_err(io_err(&a.out_sentences))?;
    out.vocab
        .write(create(&a.out_vocab)?)
        .map_err(io_err(&a.out_vocab))?;
    let st = &out.stats;
    eprintln!(
        "images {}, boxes {}, classes {}, retained classes {} (min count {}), retained boxes {}, sentences {}",
        st.images, st.boxes, st.classes, st.retained_classes, s.min_count, st.retained_boxes, st.emitted_sentences
    );
    Ok(())
}

fn cooccur(a: CooccurArgs, file: FileConfig, emit_config: bool) -> Result<()> {
    let mut s = file.cooccur;
    override_with!(s, a; window, mode, threads, records_per_shard);
    if emit_config {
        eprint!("{}", emit("cooccur", &s));
    }
    if s.window == 0 {
        return Err(Error::Config("window must be at least 1".into()));
    }
    if s.records_per_shard == 0 {
        return Err(Error::Config("records per shard must be at least 1".into()));
    }
    let mut inputs = vec![a.sentences.as_path()];
    inputs.extend(a.vocab.as_deref());
    check_inputs(&inputs)?;
    check_outputs(&[&a.out])?;
    if let Some(d) = &a.dump {
        check_outputs(&[d])?;
    }

    let sentences = read_sentences(&a.sentences)?;
    let vocab_size = match &a.vocab {
        Some(p) => read_vocab(p)?.len(),
        None => sentences
            .iter()
            .flat_map(|s| s.tokens.iter())
            .max()
            .map_or(0, |&m| m as usize + 1),
    };
    if vocab_size == 0 {
        return Err(Error::Data(format!(
            "{}: no tokens and no vocabulary",
            a.sentences.display()
        )));
    }
    let table = accumulate(&sentences, vocab_size, s.window, s.mode, s.threads.max(1))?;
    let shards = save_shards(&table, &a.out, s.records_per_shard)?;
    if let Some(d) = &a.dump {
        table.write_text(create(d)?).map_err(io_err(d))?;
    }
    eprintln!(
        "classes {}, window {}, mode {}, stored cells {}, shards {}",
        vocab_size,
        s.window,
        s.mode,
        table.len(),
        shards.len()
    );
    Ok(())
}

fn labels_for(vocab: Option<&Path>, vocab_size: usize) -> Result<Vec<String>> {
    match vocab {
        Some(p) => {
            let v = read_vocab(p)?;
            if v.len() != vocab_size {
                return Err(Error::Data(format!(
                    "{} has {} classes but the shards have {}",
                    p.display(),
                    v.len(),
                    vocab_size
                )));
            }
            Ok(v.labels().to_vec())
        }
        None => Ok((0..vocab_size).map(|k| k.to_string()).collect()),
    }
}

/// Everything except the epoch budget and thread count must match to resume.
fn check_resumable(saved: &TrainConfig, wanted: &TrainConfig) -> Result<()> {
    let comparable = |c: &TrainConfig| TrainConfig {
        epochs: 0,
        threads: 1,
        ..c.clone()
    };
    if comparable(saved) != comparable(wanted) {
        return Err(Error::Config(format!(
            "checkpoint was trained with {saved:?}, which differs from the requested settings {wanted:?}"
        )));
    }
    Ok(())
}

fn train(a: TrainArgs, file: FileConfig, emit_config: bool) -> Result<()> {
    let mut s = file.train;
    override_with!(s, a; dim, epochs, alpha, eta, seed, threads, output_mode, format, checkpoint_every);
    if let Some(x) = a.xmax {
        s.x_max = x;
    }
    if emit_config {
        eprint!("{}", emit("train", &s));
    }
    let cfg = s.train_config();
    cfg.validate()?;
    let mut inputs = vec![a.shards.as_path()];
    inputs.extend(a.vocab.as_deref());
    inputs.extend(a.resume.as_deref());
    check_inputs(&inputs)?;
    let mut outputs = vec![a.out.as_path()];
    outputs.extend(a.checkpoint.as_deref());
    outputs.extend(a.loss_log.as_deref());
    check_outputs(&outputs)?;

    let table = load_shards(&a.shards)?;
    let labels = labels_for(a.vocab.as_deref(), table.vocab_size())?;
    let (mut params, start) = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            check_resumable(&ck.config, &cfg)?;
            if ck.epochs_done > cfg.epochs {
                return Err(Error::Config(format!(
                    "checkpoint already has {} epochs, more than the requested {}",
                    ck.epochs_done, cfg.epochs
                )));
            }
            eprintln!("resuming after epoch {}", ck.epochs_done);
            (ck.params, ck.epochs_done)
        }
        None => (ModelParams::init(table.vocab_size(), cfg.dim, cfg.seed), 0),
    };

    let every = s.checkpoint_every;
    let report = trainer::train_epochs(&table, &cfg, &mut params, start, |epoch, p| match &a.checkpoint {
        Some(path) if epoch == cfg.epochs || (every > 0 && epoch % every == 0) => Checkpoint {
            config: cfg.clone(),
            epochs_done: epoch,
            params: p.clone(),
        }
        .save(path),
        _ => Ok(()),
    })?;

    for (n, loss) in report.epoch_losses.iter().enumerate() {
        eprintln!("epoch {:>4}  loss {loss:.6}", start + n + 1);
    }
    if let Some(log) = &a.loss_log {
        let mut w = create(log)?;
        for (n, loss) in report.epoch_losses.iter().enumerate() {
            writeln!(w, "{}\t{loss}", start + n + 1).map_err(io_err(log))?;
        }
        w.flush().map_err(io_err(log))?;
    }

    let store = EmbeddingStore::new(labels, cfg.dim, trainer::finalize(&params, cfg.output_mode))?;
    match s.format {
        VectorFormat::Text => store.save_text(&a.out)?,
        VectorFormat::Binary => store.save_binary(&a.out)?,
    }
    eprintln!(
        "{} vectors of dimension {}, {} cell updates in {:.2?}",
        store.len(),
        store.dim(),
        report.entries_processed,
        report.wall_time
    );
    Ok(())
}

fn load_store(vectors: &Path, vocab: Option<&Path>) -> Result<EmbeddingStore> {
    check_inputs(&[vectors])?;
    let store = EmbeddingStore::load(vectors)?;
    let Some(vp) = vocab else {
        return Ok(store);
    };
    let v = read_vocab(vp)?;
    let counts = store
        .labels()
        .iter()
        .map(|l| {
            v.id(l).and_then(|id| v.count(id)).ok_or_else(|| {
                Error::Data(format!(
                    "label {l:?} of {} is missing from {}",
                    vectors.display(),
                    vp.display()
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    store.with_counts(counts)
}

fn query(a: QueryArgs, file: FileConfig, emit_config: bool) -> Result<()> {
    let mut s = file.query;
    match &a.op {
        QueryOp::Knn { k, min_count, .. } => {
            if let Some(k) = k {
                s.k = *k;
            }
            if min_count.is_some() {
                s.min_count = *min_count;
            }
        }
        QueryOp::Enrich {
            k,
            preposition,
            no_oxford_comma,
            ..
        } => {
            if let Some(k) = k {
                s.k = *k;
            }
            if let Some(p) = preposition {
                s.preposition = p.clone();
            }
            s.oxford_comma &= !no_oxford_comma;
        }
        _ => {}
    }
    if emit_config {
        eprint!("{}", emit("query", &s));
    }
    if let Some(o) = &a.out {
        check_outputs(&[o])?;
    }
    let store = load_store(&a.vectors, a.vocab.as_deref())?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let out_name = a.out.clone().unwrap_or_else(|| PathBuf::from("<stdout>"));

    match &a.op {
        QueryOp::Knn { label, .. } => {
            let nn = embedding::nearest_neighbors(&store, label, s.k, s.min_count)?;
            nn.write_tsv(&mut out).map_err(io_err(&out_name))?;
        }
        QueryOp::Project {
            a: left,
            b: right,
            labels,
        } => {
            let p = embedding::project_axis(&store, left, right, labels)?;
            embedding::write_points_csv(&mut out, p.sorted().into_iter().map(|(l, x)| (l, vec![x])))?;
        }
        QueryOp::Pca { labels } => {
            let p = embedding::pca_2d(&store, labels)?;
            eprintln!("eigenvalues {:.6} {:.6}", p.eigenvalues[0], p.eigenvalues[1]);
            embedding::write_points_csv(&mut out, p.points.into_iter().map(|(l, x, y)| (l, vec![x, y])))?;
        }
        QueryOp::Enrich { label, .. } => {
            let template = PromptTemplate {
                preposition: s.preposition.clone(),
                oxford_comma: s.oxford_comma,
            };
            let prompt = embedding::enrich_prompt(&store, label, s.k, &template)?;
            writeln!(out, "{prompt}").map_err(io_err(&out_name))?;
        }
    }
    out.flush().map_err(io_err(&out_name))
}

fn mask_eval(a: MaskEvalArgs, file: FileConfig, emit_config: bool) -> Result<()> {
    let mut s = file.mask_eval;
    override_with!(s, a; ks, threads);
    if emit_config {
        eprint!("{}", emit("mask_eval", &s));
    }
    let mut inputs = vec![a.vectors.as_path(), a.sentences.as_path()];
    inputs.extend(a.vocab.as_deref());
    check_inputs(&inputs)?;
    let mut outputs = Vec::new();
    outputs.extend(a.dump.as_deref());
    outputs.extend(a.json.as_deref());
    check_outputs(&outputs)?;

    let store = EmbeddingStore::load(&a.vectors)?;
    let mut sentences = read_sentences(&a.sentences)?;
    if let Some(vp) = &a.vocab {
        sentences = eval::align_to_store(&sentences, &read_vocab(vp)?, &store)?;
    }
    let report = eval::evaluate(&store, &sentences, &s.ks, s.threads.max(1))?;
    let baseline = eval::random_baseline(store.len(), &s.ks).ok();
    print!("{}", report.to_table(baseline.as_deref()));
    if report.instances == 0 {
        eprintln!("warning: no masking instances (every scene has fewer than two boxes)");
    }
    if let Some(d) = &a.dump {
        report
            .write_dump(create(d)?, Some(store.labels()))
            .map_err(io_err(d))?;
    }
    if let Some(j) = &a.json {
        report.write_jsonl(create(j)?).map_err(io_err(j))?;
    }
    Ok(())
}

fn synth(a: SynthArgs, file: FileConfig, emit_config: bool) -> Result<()> {
    let mut s = file.synth;
    override_with!(s, a; scenes, clusters, per_cluster, min_size, max_size, within_prob, label_skew, seed);
    if emit_config {
        eprint!("{}", emit("synth", &s));
    }
    if s.clusters == 0 || s.per_cluster == 0 {
        return Err(Error::Config(
            "clusters and per-cluster must be at least 1".into(),
        ));
    }
    let mut outputs = vec![a.out_sentences.as_path(), a.out_vocab.as_path()];
    outputs.extend(a.out_clusters.as_deref());
    check_outputs(&outputs)?;

    let spec = ClusterSpec {
        scene_size: (s.min_size, s.max_size),
        within_prob: s.within_prob,
        label_skew: s.label_skew,
        ..ClusterSpec::uniform(s.clusters, s.per_cluster)
    };
    let c = eval::generate_synthetic_corpus(s.scenes, &spec, s.seed)?;
    corpus::write_sentences(create(&a.out_sentences)?, &c.sentences).map_err(io_err(&a.out_sentences))?;
    c.vocab
        .write(create(&a.out_vocab)?)
        .map_err(io_err(&a.out_vocab))?;
    if let Some(p) = &a.out_clusters {
        let mut w = create(p)?;
        for l in c.vocab.labels() {
            writeln!(w, "{l}\t{}", c.cluster_of[l]).map_err(io_err(p))?;
        }
        w.flush().map_err(io_err(p))?;
    }
    eprintln!("scenes {}, classes {}", c.sentences.len(), c.vocab.len());
    Ok(())
}
