//! Command-line pipeline around the `unq-core` library: synthetic data,
//! exact ground truth, model and baseline training, encoding, search, and
//! recall evaluation.
//!
//! Results files hold one line per query: the query id followed by the
//! retrieved `(id, score)` pairs, all tab-separated. Recall reports are
//! tab-separated tables with one row per method.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 numerical abort during training.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

use unq_core::{
    exact_knn, pq_encode_all, pq_search, pq_train_with_iterations, read_codes, read_fvecs,
    read_ivecs, recall_at_k, search, synth_dataset, write_codes, write_fvecs, write_ivecs,
    AblationFlags, DenseMatrix, Error, GroundTruth, IntMatrix, ModelConfig, PqCodebooks,
    SearchOptions, TrainConfig, UnqModel,
};

#[derive(Parser)]
#[command(
    name = "unq",
    version,
    about = "Neural multi-codebook quantization for nearest-neighbor search",
    long_about = "Neural multi-codebook quantization for nearest-neighbor search.\n\n\
        An optional TOML config file (--config) may hold one section per \
        subcommand, e.g. [train] or [pq-train], with keys named after the \
        long flags (epochs = 30, batch-size = 512). Keys present in the file \
        override the corresponding command-line flags. A top-level `workers` \
        key overrides --workers."
)]
struct Cli {
    /// TOML config file; keys set there override the matching flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads for parallel sections; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic train/base/query bundle.
    Synth(SynthArgs),
    /// Compute exact nearest neighbors of queries by brute force.
    Groundtruth(GroundtruthArgs),
    /// Train a quantization model and write a checkpoint.
    Train(TrainArgs),
    /// Encode a vector file into a code table with a trained model.
    Encode(EncodeArgs),
    /// Two-stage compressed-domain search: lookup-table scan, then rerank.
    Search(SearchArgs),
    /// Compute recall against exact ground truth for one or more result files.
    Evaluate(EvaluateArgs),
    /// Train product quantization codebooks with per-subspace k-means.
    PqTrain(PqTrainArgs),
    /// Encode a vector file with product quantization codebooks.
    PqEncode(PqEncodeArgs),
    /// Search product quantization codes with asymmetric distances.
    PqSearch(PqSearchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory receiving train.fvecs, base.fvecs and query.fvecs.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 5000)]
    n_train: usize,
    #[arg(long, default_value_t = 20000)]
    n_base: usize,
    #[arg(long, default_value_t = 500)]
    n_query: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Number of Gaussian mixture components.
    #[arg(long, default_value_t = 16)]
    components: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct GroundtruthArgs {
    /// Base vectors (fvecs).
    #[arg(long)]
    base: PathBuf,
    /// Query vectors (fvecs).
    #[arg(long)]
    queries: PathBuf,
    /// Neighbors per query.
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Output ground-truth ids (ivecs).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training vectors (fvecs).
    #[arg(long)]
    train: PathBuf,
    /// Output model checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Number of codebooks M; also the bytes per encoded vector.
    #[arg(long, default_value_t = 8)]
    codebooks: usize,
    /// Codewords per codebook K (at most 256).
    #[arg(long, default_value_t = 256)]
    codebook_size: usize,
    /// Dimension of the shared code space.
    #[arg(long, default_value_t = 256)]
    code_dim: usize,
    /// Hidden layer widths, comma separated, for encoder and decoder.
    #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 1024])]
    hidden: Vec<usize>,
    /// Triplet loss weight; 0 disables triplet mining entirely.
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta_start: f64,
    #[arg(long, default_value_t = 0.05)]
    beta_end: f64,
    /// Triplet margin.
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 1024)]
    batch_size: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    peak_lr: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Ablation: drop the triplet term.
    #[arg(long)]
    no_triplet: bool,
    /// Ablation: train on the triplet term alone.
    #[arg(long)]
    triplet_only: bool,
    /// Ablation: drop the codeword balance regularizer.
    #[arg(long)]
    no_regularizer: bool,
    /// Ablation: aggregate soft assignments instead of hard one-hots.
    #[arg(long)]
    soft_gumbel: bool,
}

#[derive(Args)]
struct EncodeArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Vectors to encode (fvecs).
    #[arg(long)]
    input: PathBuf,
    /// Output code table.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Encoded base vectors.
    #[arg(long)]
    codes: PathBuf,
    /// Query vectors (fvecs).
    #[arg(long)]
    queries: PathBuf,
    /// Output results file.
    #[arg(long)]
    out: PathBuf,
    /// Stage-one candidate list length L; must be at least k.
    #[arg(long, short = 'L', default_value_t = 500)]
    candidates: usize,
    /// Answers per query.
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Ablation: return scan order directly, skipping the rerank stage.
    #[arg(long)]
    no_rerank: bool,
    /// Scan raw inner products instead of temperature-scaled ones.
    #[arg(long)]
    no_temperature: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Exact ground-truth ids (ivecs).
    #[arg(long)]
    ground_truth: PathBuf,
    /// Result entry `LABEL[:BYTES]=PATH`; repeatable, one table row each.
    #[arg(long = "results", value_name = "LABEL[:BYTES]=PATH", required = true)]
    results: Vec<String>,
    /// Recall cutoffs, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 10, 100])]
    k: Vec<usize>,
}

#[derive(Args)]
struct PqTrainArgs {
    /// Training vectors (fvecs).
    #[arg(long)]
    train: PathBuf,
    /// Output codebook file.
    #[arg(long)]
    out: PathBuf,
    /// Number of subspaces M; also the bytes per encoded vector.
    #[arg(long, default_value_t = 8)]
    subspaces: usize,
    /// Centroids per subspace K (at most 256).
    #[arg(long, default_value_t = 256)]
    codebook_size: usize,
    /// Maximum Lloyd iterations per subspace.
    #[arg(long, default_value_t = 25)]
    iterations: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct PqEncodeArgs {
    /// Codebook file.
    #[arg(long)]
    codebooks: PathBuf,
    /// Vectors to encode (fvecs).
    #[arg(long)]
    input: PathBuf,
    /// Output code table.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PqSearchArgs {
    /// Codebook file.
    #[arg(long)]
    codebooks: PathBuf,
    /// Encoded base vectors.
    #[arg(long)]
    codes: PathBuf,
    /// Query vectors (fvecs).
    #[arg(long)]
    queries: PathBuf,
    /// Output results file.
    #[arg(long)]
    out: PathBuf,
    /// Answers per query.
    #[arg(long, default_value_t = 100)]
    k: usize,
}

/// Config file contents: one optional section per subcommand, keys named
/// after the long flags.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct FileConfig {
    workers: Option<usize>,
    synth: Option<SynthFile>,
    groundtruth: Option<GroundtruthFile>,
    train: Option<TrainFile>,
    encode: Option<EncodeFile>,
    search: Option<SearchFile>,
    evaluate: Option<EvaluateFile>,
    pq_train: Option<PqTrainFile>,
    pq_encode: Option<PqEncodeFile>,
    pq_search: Option<PqSearchFile>,
}

macro_rules! apply {
    ($file:expr, $args:expr, $($field:ident),+ $(,)?) => {
        $(if let Some(v) = $file.$field {
            $args.$field = v;
        })+
    };
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct SynthFile {
    out_dir: Option<PathBuf>,
    n_train: Option<usize>,
    n_base: Option<usize>,
    n_query: Option<usize>,
    dim: Option<usize>,
    components: Option<usize>,
    seed: Option<u64>,
}

impl SynthFile {
    fn apply(self, a: &mut SynthArgs) {
        apply!(self, a, out_dir, n_train, n_base, n_query, dim, components, seed);
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct GroundtruthFile {
    base: Option<PathBuf>,
    queries: Option<PathBuf>,
    k: Option<usize>,
    out: Option<PathBuf>,
}

impl GroundtruthFile {
    fn apply(self, a: &mut GroundtruthArgs) {
        apply!(self, a, base, queries, k, out);
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct TrainFile {
    train: Option<PathBuf>,
    out: Option<PathBuf>,
    codebooks: Option<usize>,
    codebook_size: Option<usize>,
    code_dim: Option<usize>,
    hidden: Option<Vec<usize>>,
    alpha: Option<f64>,
    beta_start: Option<f64>,
    beta_end: Option<f64>,
    delta: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    peak_lr: Option<f64>,
    seed: Option<u64>,
    no_triplet: Option<bool>,
    triplet_only: Option<bool>,
    no_regularizer: Option<bool>,
    soft_gumbel: Option<bool>,
}

impl TrainFile {
    fn apply(self, a: &mut TrainArgs) {
        apply!(
            self,
            a,
            train,
            out,
            codebooks,
            codebook_size,
            code_dim,
            hidden,
            alpha,
            beta_start,
            beta_end,
            delta,
            batch_size,
            epochs,
            peak_lr,
            seed,
            no_triplet,
            triplet_only,
            no_regularizer,
            soft_gumbel,
        );
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct EncodeFile {
    model: Option<PathBuf>,
    input: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl EncodeFile {
    fn apply(self, a: &mut EncodeArgs) {
        apply!(self, a, model, input, out);
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct SearchFile {
    model: Option<PathBuf>,
    codes: Option<PathBuf>,
    queries: Option<PathBuf>,
    out: Option<PathBuf>,
    candidates: Option<usize>,
    k: Option<usize>,
    no_rerank: Option<bool>,
    no_temperature: Option<bool>,
}

impl SearchFile {
    fn apply(self, a: &mut SearchArgs) {
        apply!(
            self,
            a,
            model,
            codes,
            queries,
            out,
            candidates,
            k,
            no_rerank,
            no_temperature
        );
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct EvaluateFile {
    ground_truth: Option<PathBuf>,
    results: Option<Vec<String>>,
    k: Option<Vec<usize>>,
}

impl EvaluateFile {
    fn apply(self, a: &mut EvaluateArgs) {
        apply!(self, a, ground_truth, results, k);
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct PqTrainFile {
    train: Option<PathBuf>,
    out: Option<PathBuf>,
    subspaces: Option<usize>,
    codebook_size: Option<usize>,
    iterations: Option<usize>,
    seed: Option<u64>,
}

impl PqTrainFile {
    fn apply(self, a: &mut PqTrainArgs) {
        apply!(
            self,
            a,
            train,
            out,
            subspaces,
            codebook_size,
            iterations,
            seed
        );
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct PqEncodeFile {
    codebooks: Option<PathBuf>,
    input: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl PqEncodeFile {
    fn apply(self, a: &mut PqEncodeArgs) {
        apply!(self, a, codebooks, input, out);
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct PqSearchFile {
    codebooks: Option<PathBuf>,
    codes: Option<PathBuf>,
    queries: Option<PathBuf>,
    out: Option<PathBuf>,
    k: Option<usize>,
}

impl PqSearchFile {
    fn apply(self, a: &mut PqSearchArgs) {
        apply!(self, a, codebooks, codes, queries, out, k);
    }
}

fn load_file_config(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Core(Error::io(path, e)))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))
}

fn merge_config(cli: &mut Cli) -> Result<(), CliError> {
    let Some(path) = cli.config.clone() else {
        return Ok(());
    };
    let file = load_file_config(&path)?;
    if let Some(w) = file.workers {
        cli.workers = w;
    }
    match &mut cli.command {
        Command::Synth(a) => file.synth.map(|f| f.apply(a)),
        Command::Groundtruth(a) => file.groundtruth.map(|f| f.apply(a)),
        Command::Train(a) => file.train.map(|f| f.apply(a)),
        Command::Encode(a) => file.encode.map(|f| f.apply(a)),
        Command::Search(a) => file.search.map(|f| f.apply(a)),
        Command::Evaluate(a) => file.evaluate.map(|f| f.apply(a)),
        Command::PqTrain(a) => file.pq_train.map(|f| f.apply(a)),
        Command::PqEncode(a) => file.pq_encode.map(|f| f.apply(a)),
        Command::PqSearch(a) => file.pq_search.map(|f| f.apply(a)),
    };
    Ok(())
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(msg) => CliError::Usage(msg),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(Error::NonFiniteLoss { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(msg) => msg.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let mut cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = merge_config(&mut cli) {
        eprintln!("error: {}", e.message());
        return ExitCode::from(e.code());
    }
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
        {
            eprintln!("error: cannot configure {} workers: {e}", cli.workers);
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Groundtruth(a) => cmd_groundtruth(a),
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Search(a) => cmd_search(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::PqTrain(a) => cmd_pq_train(a),
        Command::PqEncode(a) => cmd_pq_encode(a),
        Command::PqSearch(a) => cmd_pq_search(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let bundle = synth_dataset(a.n_train, a.n_base, a.n_query, a.dim, a.components, a.seed)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Core(Error::io(&a.out_dir, e)))?;
    for (name, matrix) in [
        ("train.fvecs", &bundle.train),
        ("base.fvecs", &bundle.base),
        ("query.fvecs", &bundle.queries),
    ] {
        let path = a.out_dir.join(name);
        write_fvecs(&path, matrix)?;
        println!(
            "wrote {} ({} x {})",
            path.display(),
            matrix.rows(),
            matrix.cols()
        );
    }
    Ok(())
}

fn cmd_groundtruth(a: GroundtruthArgs) -> Result<(), CliError> {
    let base = read_fvecs(&a.base)?;
    let queries = read_fvecs(&a.queries)?;
    let gt = exact_knn(&base, &queries, a.k)?;
    let mut ids = Vec::with_capacity(queries.rows() * a.k);
    for q in 0..gt.num_queries() {
        for &id in gt.row(q) {
            ids.push(id as i32);
        }
    }
    let table = IntMatrix::from_vec(gt.num_queries(), gt.k(), ids)?;
    write_ivecs(&a.out, &table)?;
    println!(
        "wrote {} ({} queries x {} neighbors)",
        a.out.display(),
        gt.num_queries(),
        gt.k()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let train_set = read_fvecs(&a.train)?;
    if train_set.rows() == 0 {
        return Err(CliError::Core(Error::InvalidBatch { rows: 0 }));
    }
    let mut model_config = ModelConfig::new(train_set.cols());
    model_config.num_codebooks = a.codebooks;
    model_config.codebook_size = a.codebook_size;
    model_config.code_dim = a.code_dim;
    model_config.hidden = a.hidden.clone();
    let config = TrainConfig {
        alpha: a.alpha,
        beta_start: a.beta_start,
        beta_end: a.beta_end,
        delta: a.delta,
        batch_size: a.batch_size,
        epochs: a.epochs,
        peak_lr: a.peak_lr,
        ablation: AblationFlags {
            no_triplet: a.no_triplet,
            triplet_only: a.triplet_only,
            no_regularizer: a.no_regularizer,
            soft_gumbel: a.soft_gumbel,
        },
        ..TrainConfig::default()
    };
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut model = UnqModel::<f32>::new(model_config, &mut rng)?;
    fit_and_stream(&mut model, &train_set, &config, &mut rng)?;
    model.save(&a.out)?;
    println!(
        "wrote {} ({} codebooks x {} codewords, {} bytes per vector)",
        a.out.display(),
        model.num_codebooks(),
        model.codebook_size(),
        model.bytes_per_vector()
    );
    Ok(())
}

fn fit_and_stream(
    model: &mut UnqModel<f32>,
    train_set: &DenseMatrix<f32>,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(), CliError> {
    unq_core::fit_with(model, train_set, config, rng, |stats| {
        println!("{}", stats.log_line());
    })?;
    Ok(())
}

fn cmd_encode(a: EncodeArgs) -> Result<(), CliError> {
    let model = UnqModel::<f32>::load(&a.model)?;
    let input = read_fvecs(&a.input)?;
    if input.rows() > 0 && input.cols() != model.input_dim() {
        return Err(CliError::Core(Error::shape(
            "encode",
            format!("{} columns to match the model", model.input_dim()),
            format!("{}", input.cols()),
        )));
    }
    let table = model.hard_encode(&input)?;
    write_codes(&a.out, &table)?;
    println!(
        "wrote {} ({} vectors, {} bytes each)",
        a.out.display(),
        table.len(),
        table.num_codebooks()
    );
    Ok(())
}

fn cmd_search(a: SearchArgs) -> Result<(), CliError> {
    if a.k == 0 {
        return Err(CliError::Usage("k must be at least 1".into()));
    }
    if a.candidates < a.k {
        return Err(CliError::Usage(format!(
            "candidate list length {} must be at least k = {}",
            a.candidates, a.k
        )));
    }
    let model = UnqModel::<f32>::load(&a.model)?;
    let table = read_codes(&a.codes)?;
    let queries = read_fvecs(&a.queries)?;
    if queries.rows() > 0 && queries.cols() != model.input_dim() {
        return Err(CliError::Core(Error::shape(
            "search",
            format!("{} query columns to match the model", model.input_dim()),
            format!("{}", queries.cols()),
        )));
    }
    let opts = SearchOptions {
        candidates: a.candidates,
        top_k: a.k,
        no_rerank: a.no_rerank,
        use_temperature: !a.no_temperature,
    };
    let per_query: Vec<Vec<(u32, f32)>> = (0..queries.rows())
        .into_par_iter()
        .map(|q| {
            let result = search(&model, queries.row(q), &table, &opts)?;
            Ok(result
                .hits
                .iter()
                .map(|h| (h.id, h.rerank_score.unwrap_or(h.scan_score)))
                .collect())
        })
        .collect::<Result<_, Error>>()?;
    write_results(&a.out, &per_query)?;
    println!(
        "wrote {} ({} queries, top {})",
        a.out.display(),
        per_query.len(),
        a.k
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(CliError::Usage("recall cutoffs must be positive".into()));
    }
    let gt = read_ground_truth(&a.ground_truth)?;
    let mut header = String::from("method\tbytes");
    for k in &a.k {
        let _ = write!(header, "\tR@{k}");
    }
    println!("{header}");
    for entry in &a.results {
        let (label, bytes, path) = parse_results_entry(entry)?;
        let results = read_results(Path::new(path))?;
        if results.len() != gt.num_queries() {
            return Err(CliError::Core(Error::shape(
                "evaluate",
                format!(
                    "{} result lines to match the ground truth",
                    gt.num_queries()
                ),
                format!("{} in {path}", results.len()),
            )));
        }
        let mut row = format!("{label}\t{bytes}");
        for &k in &a.k {
            let recall = recall_at_k(&results, &gt, k)?;
            let _ = write!(row, "\t{:.1}", recall * 100.0);
        }
        println!("{row}");
    }
    Ok(())
}

fn cmd_pq_train(a: PqTrainArgs) -> Result<(), CliError> {
    let train_set = read_fvecs(&a.train)?;
    let cb = pq_train_with_iterations(
        &train_set,
        a.subspaces,
        a.codebook_size,
        a.iterations,
        a.seed,
    )?;
    cb.save(&a.out)?;
    println!(
        "wrote {} ({} subspaces x {} centroids, {} bytes per vector)",
        a.out.display(),
        a.subspaces,
        a.codebook_size,
        cb.bytes_per_vector()
    );
    Ok(())
}

fn cmd_pq_encode(a: PqEncodeArgs) -> Result<(), CliError> {
    let cb = PqCodebooks::load(&a.codebooks)?;
    let input = read_fvecs(&a.input)?;
    let table = pq_encode_all(&cb, &input)?;
    write_codes(&a.out, &table)?;
    println!(
        "wrote {} ({} vectors, {} bytes each)",
        a.out.display(),
        table.len(),
        table.num_codebooks()
    );
    Ok(())
}

fn cmd_pq_search(a: PqSearchArgs) -> Result<(), CliError> {
    if a.k == 0 {
        return Err(CliError::Usage("k must be at least 1".into()));
    }
    let cb = PqCodebooks::load(&a.codebooks)?;
    let table = read_codes(&a.codes)?;
    let queries = read_fvecs(&a.queries)?;
    let per_query: Vec<Vec<(u32, f32)>> = (0..queries.rows())
        .into_par_iter()
        .map(|q| pq_search(&cb, queries.row(q), &table, a.k))
        .collect::<Result<_, Error>>()?;
    write_results(&a.out, &per_query)?;
    println!(
        "wrote {} ({} queries, top {})",
        a.out.display(),
        per_query.len(),
        a.k
    );
    Ok(())
}

/// One line per query: query id, then the `(id, score)` pairs, tab-separated.
fn write_results(path: &Path, per_query: &[Vec<(u32, f32)>]) -> Result<(), CliError> {
    let mut text = String::new();
    for (q, hits) in per_query.iter().enumerate() {
        let _ = write!(text, "{q}");
        for (id, score) in hits {
            let _ = write!(text, "\t{id}\t{score:.6}");
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| CliError::Core(Error::io(path, e)))
}

/// Reads back the id lists of a results file; scores are ignored.
fn read_results(path: &Path) -> Result<Vec<Vec<u32>>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Core(Error::io(path, e)))?;
    let bad = |line: usize, message: &str| {
        CliError::Core(Error::format(
            path,
            line as u64,
            format!("line {}: {message}", line + 1),
        ))
    };
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut fields = line.split('\t');
        let qid: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad(ln, "missing query id"))?;
        if qid != ln {
            return Err(bad(ln, "query ids must be consecutive from 0"));
        }
        let mut ids = Vec::new();
        while let Some(id) = fields.next() {
            let id: u32 = id.parse().map_err(|_| bad(ln, "malformed result id"))?;
            fields
                .next()
                .ok_or_else(|| bad(ln, "result id without a score"))?;
            ids.push(id);
        }
        out.push(ids);
    }
    Ok(out)
}

/// Ground-truth ivecs as unsigned ids.
fn read_ground_truth(path: &Path) -> Result<GroundTruth, CliError> {
    let table = read_ivecs(path)?;
    let mut ids = Vec::with_capacity(table.rows() * table.cols());
    for &v in table.data() {
        if v < 0 {
            return Err(CliError::Core(Error::format(
                path,
                0,
                format!("negative id {v}"),
            )));
        }
        ids.push(v as u32);
    }
    Ok(GroundTruth::from_ids(table.rows(), table.cols(), ids)?)
}

/// `LABEL[:BYTES]=PATH`; the bytes column prints `-` when omitted.
fn parse_results_entry(entry: &str) -> Result<(&str, String, &str), CliError> {
    let (spec, path) = entry.split_once('=').ok_or_else(|| {
        CliError::Usage(format!(
            "results entry '{entry}' must look like LABEL[:BYTES]=PATH"
        ))
    })?;
    if spec.is_empty() || path.is_empty() {
        return Err(CliError::Usage(format!(
            "results entry '{entry}' must look like LABEL[:BYTES]=PATH"
        )));
    }
    match spec.split_once(':') {
        Some((label, bytes)) => {
            let _: u32 = bytes.parse().map_err(|_| {
                CliError::Usage(format!("results entry '{entry}': bytes must be an integer"))
            })?;
            Ok((label, bytes.to_string(), path))
        }
        None => Ok((spec, "-".to_string(), path)),
    }
}
