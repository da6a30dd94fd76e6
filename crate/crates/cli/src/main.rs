//! `unitgraph` command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use unitgraph::capture::{
    assemble_flows_with_report, parse_pcap, read_flow_store, write_flow_store, IngestReport, TrafficFlow,
};
use unitgraph::graph::{build_views, read_graph_cache, to_dot, write_graph_cache, FlowGraphs, PmiConfig};
use unitgraph::synth::{ablation_sweep, generate, AblationAxis, SynthSpec};
use unitgraph::train::{evaluate, prepare_flows, stratified_split, train, Checkpoint, TrainConfig};
use unitgraph::units::tokenize_packet_view;

#[derive(Parser)]
#[command(name = "unitgraph", version, about = "Encrypted-traffic classification over multi-view traffic graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn labelled pcap files into a flow store.
    Ingest(IngestArgs),
    /// Generate a labelled synthetic flow store.
    Synth(SynthArgs),
    /// Build per-packet graphs for a flow store and cache them.
    Build(BuildArgs),
    /// Print unit sequences or graphs of one packet.
    Inspect(InspectArgs),
    /// Train a model and write best and last checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a flow store.
    Eval(EvalArgs),
    /// Train one model per sweep point and tabulate held-out metrics.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Directory of .pcap files. Without --labels every subdirectory is a
    /// class named after it.
    #[arg(long)]
    pcap_dir: PathBuf,
    /// CSV with columns `file,label`; `file` is relative to --pcap-dir and
    /// `label` is a class name or integer.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Split flows into time blocks of this many seconds.
    #[arg(long)]
    block_seconds: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Vocabulary {
    Shared,
    Disjoint,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    flows_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "shared")]
    vocabulary: Vocabulary,
    /// JSON recipe file; overrides --classes, --flows-per-class and --vocabulary.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    flows: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "4,8")]
    views: Vec<u32>,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    flows: PathBuf,
    /// Print unit sequences of packet PKT of flow FLOW.
    #[arg(long, num_args = 2, value_names = ["FLOW", "PKT"], conflicts_with = "graph")]
    units: Option<Vec<usize>>,
    /// Widths for --units.
    #[arg(long, value_delimiter = ',', default_value = "4,8")]
    views: Vec<u32>,
    /// Print the VIEW-bit graph of packet PKT of flow FLOW.
    #[arg(long, num_args = 3, value_names = ["FLOW", "PKT", "VIEW"])]
    graph: Option<Vec<usize>>,
    /// Emit the graph as Graphviz DOT instead of a summary.
    #[arg(long, requires = "graph")]
    dot: bool,
    #[arg(long, default_value_t = 5)]
    window: usize,
}

/// Every training option; each overrides the config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    gradient_accumulation: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    warmup_fraction: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    gnn_dropout: Option<f64>,
    #[arg(long)]
    lstm_dropout: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<u32>>,
    #[arg(long)]
    pmi_window: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    heterogeneous: Option<bool>,
    #[arg(long)]
    restart_prob: Option<f64>,
    #[arg(long)]
    walk_target_fraction: Option<f64>,
    #[arg(long)]
    max_walk_steps_factor: Option<usize>,
    #[arg(long)]
    flip_prob: Option<f64>,
    #[arg(long)]
    packet_drop_prob: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    stop_anchor_gradient: Option<bool>,
    #[arg(long)]
    adam_beta1: Option<f64>,
    #[arg(long)]
    adam_beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    eval_batch_size: Option<usize>,
}

macro_rules! apply_overrides {
    ($cfg:ident, $o:ident, $($field:ident),* $(,)?) => {
        $(if let Some(v) = $o.$field.clone() {
            $cfg.$field = v;
        })*
    };
}

impl Overrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        let o = self;
        apply_overrides!(
            cfg,
            o,
            batch_size,
            gradient_accumulation,
            epochs,
            lr_max,
            lr_min,
            warmup_fraction,
            label_smoothing,
            gnn_dropout,
            lstm_dropout,
            alpha,
            beta,
            seed,
            views,
            pmi_window,
            num_layers,
            embed_dim,
            hidden_dim,
            heterogeneous,
            restart_prob,
            walk_target_fraction,
            max_walk_steps_factor,
            flip_prob,
            packet_drop_prob,
            temperature,
            stop_anchor_gradient,
            adam_beta1,
            adam_beta2,
            adam_eps,
            eval_batch_size,
        );
    }
}

#[derive(Args)]
struct DataArgs {
    /// Flow store (JSON lines) or graph cache written by `build`.
    #[arg(long)]
    flows: PathBuf,
    /// Held-out flows in either format. Without it a stratified 9:1 split of
    /// --flows is used.
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// Seed of the 9:1 split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Flat TOML file with any subset of the training options.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; receives best/, last/ and report.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory or file.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    flows: PathBuf,
    /// Also write the metrics to this file.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Views,
    Pairs,
    Hetero,
    Alpha,
    Beta,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    axis: Axis,
    /// Sweep values for the alpha and beta axes.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    values: Vec<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV table.
    #[arg(long)]
    out: PathBuf,
    /// Also write the table as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Synth(a) => synth(a),
        Command::Build(a) => build(a),
        Command::Inspect(a) => inspect(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn pcaps_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "pcap") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// `(pcap path, class name)` pairs.
fn labelled_pcaps(args: &IngestArgs) -> Result<Vec<(PathBuf, String)>> {
    let mut out = Vec::new();
    match &args.labels {
        Some(csv_path) => {
            let mut reader = csv::ReaderBuilder::new()
                .trim(csv::Trim::All)
                .from_path(csv_path)
                .with_context(|| format!("opening {}", csv_path.display()))?;
            for row in reader.records() {
                let row = row?;
                let (file, label) = match (row.get(0), row.get(1)) {
                    (Some(f), Some(l)) => (f, l),
                    _ => bail!("{}: rows need `file,label`", csv_path.display()),
                };
                out.push((args.pcap_dir.join(file), label.to_string()));
            }
        }
        None => {
            let mut classes = Vec::new();
            for entry in fs::read_dir(&args.pcap_dir).with_context(|| format!("reading {}", args.pcap_dir.display()))? {
                let path = entry?.path();
                if path.is_dir() {
                    classes.push(path);
                }
            }
            classes.sort();
            for class in classes {
                let name = class.file_name().unwrap().to_string_lossy().into_owned();
                for pcap in pcaps_in(&class)? {
                    out.push((pcap, name.clone()));
                }
            }
        }
    }
    if out.is_empty() {
        bail!("no labelled pcap files found under {}", args.pcap_dir.display());
    }
    Ok(out)
}

/// Integer labels are used as-is; otherwise names are numbered in sorted order.
fn class_indices(names: &[String]) -> BTreeMap<String, usize> {
    let unique: std::collections::BTreeSet<&String> = names.iter().collect();
    if unique.iter().all(|n| n.parse::<usize>().is_ok()) {
        unique.into_iter().map(|n| (n.clone(), n.parse().unwrap())).collect()
    } else {
        unique.into_iter().enumerate().map(|(i, n)| (n.clone(), i)).collect()
    }
}

fn ingest(args: IngestArgs) -> Result<()> {
    let files = labelled_pcaps(&args)?;
    let names: Vec<String> = files.iter().map(|(_, n)| n.clone()).collect();
    let classes = class_indices(&names);
    let mut flows = Vec::new();
    let mut report = IngestReport::default();
    for (path, name) in &files {
        let packets = parse_pcap(path)?;
        let (mut f, r) = assemble_flows_with_report(&packets, classes[name], args.block_seconds);
        log::info!("{}: {} frames, {} flows", path.display(), r.frames, r.flows);
        report.merge(&r);
        flows.append(&mut f);
    }
    write_flow_store(&flows, &args.out)?;
    for (name, idx) in &classes {
        eprintln!("class {idx} = {name}");
    }
    eprintln!("{report:#?}");
    println!("wrote {} flows to {}", flows.len(), args.out.display());
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<SynthSpec>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => match args.vocabulary {
            Vocabulary::Shared => SynthSpec::shared_vocabulary(args.classes, args.flows_per_class, args.seed),
            Vocabulary::Disjoint => {
                if args.classes > 16 {
                    bail!("disjoint vocabularies support at most 16 classes");
                }
                SynthSpec::disjoint_vocabulary(args.classes, args.flows_per_class, args.seed)
            }
        },
    };
    let flows = generate(&spec, args.seed).map_err(|e| anyhow!("invalid synthetic spec: {e}"))?;
    write_flow_store(&flows, &args.out)?;
    println!("wrote {} flows to {}", flows.len(), args.out.display());
    Ok(())
}

fn build(args: BuildArgs) -> Result<()> {
    let flows = read_flow_store(&args.flows)?;
    let pmi = PmiConfig {
        window_size: args.window,
    };
    pmi.validate()?;
    let graphs = prepare_flows(&flows, &args.views, &pmi)?;
    write_graph_cache(&graphs, &args.out)?;
    println!("wrote graphs of {} flows to {}", graphs.len(), args.out.display());
    Ok(())
}

fn packet_of<'a>(flows: &'a [TrafficFlow], flow: usize, pkt: usize) -> Result<&'a unitgraph::capture::PacketRecord> {
    let f = flows
        .get(flow)
        .ok_or_else(|| anyhow!("flow {flow} out of range ({} flows)", flows.len()))?;
    f.packets
        .get(pkt)
        .ok_or_else(|| anyhow!("packet {pkt} out of range ({} packets)", f.packets.len()))
}

fn join(units: &[u16]) -> String {
    units.iter().map(u16::to_string).collect::<Vec<_>>().join(" ")
}

fn inspect(args: InspectArgs) -> Result<()> {
    let flows = read_flow_store(&args.flows)?;
    if let Some(ix) = &args.units {
        let p = packet_of(&flows, ix[0], ix[1])?;
        for &n in &args.views {
            let u = tokenize_packet_view(p, n)?;
            println!("view {n} header: {}", join(&u.header_units));
            println!("view {n} payload: {}", join(&u.payload_units));
        }
    } else if let Some(ix) = &args.graph {
        let p = packet_of(&flows, ix[0], ix[1])?;
        let view = ix[2] as u32;
        let pmi = PmiConfig {
            window_size: args.window,
        };
        let g = build_views(p, &[view], &pmi)?.remove(&view).expect("requested view");
        if args.dot {
            print!("{}", to_dot(&g, &format!("flow{}_pkt{}_view{view}", ix[0], ix[1])));
        } else {
            println!(
                "view {view}: {} nodes, {} h-h, {} p-p, {} h-p edges",
                g.num_nodes(),
                g.edges[0].len(),
                g.edges[1].len(),
                g.edges[2].len()
            );
        }
    } else {
        let packets: usize = flows.iter().map(|f| f.packets.len()).sum();
        let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
        for f in &flows {
            *per_class.entry(f.label).or_default() += 1;
        }
        println!("{} flows, {packets} packets", flows.len());
        for (label, n) in per_class {
            println!("class {label}: {n} flows");
        }
    }
    Ok(())
}

fn is_graph_cache(path: &Path) -> Result<bool> {
    use std::io::Read as _;
    let mut magic = [0u8; 8];
    let mut file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(file.read(&mut magic)? == 8 && &magic == b"UGRAPHS\0")
}

/// Loads graphs from a cache, or builds them from a flow store.
fn load_graphs(path: &Path, views: &[u32], pmi: &PmiConfig) -> Result<Vec<FlowGraphs>> {
    if is_graph_cache(path)? {
        let graphs = read_graph_cache(path)?;
        if let Some(g) = graphs.iter().flat_map(|f| &f.packets).next() {
            if let Some(v) = views.iter().find(|v| !g.contains_key(v)) {
                bail!("{} has no {v}-bit graphs; rebuild it with --views", path.display());
            }
        }
        Ok(graphs)
    } else {
        Ok(prepare_flows(&read_flow_store(path)?, views, pmi)?)
    }
}

fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// `(train, heldout, num_classes)`.
fn load_split(data: &DataArgs, views: &[u32], pmi: &PmiConfig) -> Result<(Vec<FlowGraphs>, Vec<FlowGraphs>, usize)> {
    let all = load_graphs(&data.flows, views, pmi)?;
    let (train_set, heldout) = match &data.heldout {
        Some(p) => (all, load_graphs(p, views, pmi)?),
        None => stratified_split(&all, |f| f.label, data.split_seed)?,
    };
    let num_classes = train_set
        .iter()
        .chain(&heldout)
        .map(|f| f.label + 1)
        .max()
        .ok_or_else(|| anyhow!("no flows"))?;
    log::info!(
        "{} training flows, {} held-out flows, {num_classes} classes",
        train_set.len(),
        heldout.len()
    );
    Ok((train_set, heldout, num_classes))
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let (train_set, heldout, num_classes) = load_split(&args.data, &cfg.views, &cfg.pmi_config())?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let stdout = std::io::stdout();
    let out = train(&train_set, &heldout, num_classes, &cfg, |e| {
        let mut lock = stdout.lock();
        let _ = writeln!(lock, "{}", serde_json::to_string(e).expect("report serializes"));
    })?;
    out.best.save(args.out.join("best"))?;
    out.last.save(args.out.join("last"))?;
    let report = args.out.join("report.jsonl");
    fs::write(&report, out.report.to_json_lines()).with_context(|| format!("writing {}", report.display()))?;
    fs::write(args.out.join("config.toml"), cfg.to_toml_string())?;
    eprintln!(
        "best epoch {} of {}, {:.1}s",
        out.report.best_epoch,
        out.report.epochs.len(),
        out.report.wall_clock_secs
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let model = ckpt.to_model()?;
    let graphs = load_graphs(&args.flows, &ckpt.config.views, &ckpt.config.pmi_config())?;
    if let Some(f) = graphs.iter().find(|f| f.label >= ckpt.num_classes) {
        bail!("flow label {} exceeds the checkpoint's {} classes", f.label, ckpt.num_classes);
    }
    let metrics = evaluate(&model, &graphs, ckpt.config.eval_batch_size)?;
    let json = serde_json::to_string_pretty(&metrics)?;
    if let Some(path) = &args.json {
        fs::write(path, &json).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{json}");
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let base = load_config(args.config.as_deref(), &args.overrides)?;
    let axis = match args.axis {
        Axis::Views => AblationAxis::Views,
        Axis::Pairs => AblationAxis::Pairs,
        Axis::Hetero => AblationAxis::Hetero,
        Axis::Alpha => AblationAxis::Alpha(args.values.clone()),
        Axis::Beta => AblationAxis::Beta(args.values.clone()),
    };
    let views: Vec<u32> = axis.views_needed(&base).into_iter().collect();
    let (train_set, heldout, num_classes) = load_split(&args.data, &views, &base.pmi_config())?;
    if heldout.is_empty() {
        bail!("ablation needs held-out flows");
    }
    let table = ablation_sweep(&base, &axis, &train_set, &heldout, num_classes, |row| {
        eprintln!(
            "{} = {}: flow F1 {:.4}, packet F1 {:.4}",
            row.axis, row.point, row.metrics.flow_macro_f1, row.metrics.packet_macro_f1
        );
    })?;
    fs::write(&args.out, table.to_csv()).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(path) = &args.json {
        fs::write(path, table.to_json()).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{}", table.to_csv());
    Ok(())
}
