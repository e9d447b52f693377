//! The `maxent-hmm` command line. Reports are `key value` lines on stdout.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::hidden::{self, expand_block, hv_evaluate, Emitters, HiddenMaxentModel};
use crate::io::{self, fmt_e, ModelFile};
use crate::maxent::{self, Dataset, Distribution, EventBlock, MaxentModel, TrainOptions, TrainTrace};
use crate::reduction::{self, ViaHmmOptions};
use crate::seq::{self, MemmLattice};
use crate::synth::{self, GeneratorKind, SynthSpec, TruthModel};
use crate::transforms;

#[derive(Parser, Debug)]
#[command(
    name = "maxent-hmm",
    version,
    about = "Maxent models trained directly or through their HMM form"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Method {
    Gis,
    Fb,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum HvMethod {
    Fb,
    Em,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Report {
    Ll,
    Acc,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Op {
    Subunit,
    Group,
    Strip,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Gen {
    Plain,
    Hv,
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    /// Iteration cap.
    #[arg(long, default_value_t = 10_000)]
    pub iters: usize,
    /// Stop once the largest relative constraint residual is at most this.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainArgs {
    fn options(&self) -> TrainOptions {
        TrainOptions {
            max_iters: self.iters,
            tol: self.tol,
            seed: self.seed.unwrap_or(0),
            record_trace: true,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a maxent model with GIS or forward-backward.
    Train {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        /// Rotate the feature order of the HMM chains between iterations (fb only).
        #[arg(long)]
        rotate: bool,
    },
    /// Log-likelihood and accuracy of a model on events.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        report: Report,
    },
    /// Largest relative gap between observed and expected feature counts.
    Check {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Group, scale below one, or strip anti-indicators.
    Transform {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        op: Op,
        #[arg(long)]
        out: PathBuf,
    },
    /// Largest total-variation distance between two models over the events.
    Compare {
        #[arg(long = "model", num_args = 1, required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a hidden-variable model.
    HvTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        hidden: usize,
        #[arg(long, value_enum)]
        method: HvMethod,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Generate synthetic events and the model that produced them.
    Synth {
        #[arg(long, value_enum)]
        gen: Gen,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        events: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 3)]
        outputs: usize,
        /// Values per template, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [4, 6, 6])]
        templates: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        hidden: usize,
    },
    /// Train per-state transition models from a sequence file.
    MemmTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Most probable state sequence for each sequence in a file.
    MemmDecode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command,
/// writing reports to `out` and warnings to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::invalid(e.to_string()))?;
    execute(cli.command, out, err)
}

fn kv(out: &mut dyn Write, key: &str, value: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{key} {value}")?;
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn load_events(path: &Path, err: &mut dyn Write) -> Result<Dataset> {
    let parsed = io::read_events(path)?;
    for w in &parsed.warnings {
        writeln!(err, "warning: {}: {w}", path.display())?;
    }
    Ok(parsed.value)
}

fn plain_model(mf: ModelFile) -> Result<(MaxentModel, Option<transforms::GroupPartition>)> {
    match mf {
        ModelFile::Maxent { model, partition } => Ok((model, partition)),
        _ => Err(Error::invalid("expected a plain maxent model")),
    }
}

/// Pads or checks the data's feature count against a model's.
fn align(data: Dataset, num_features: usize) -> Result<Dataset> {
    if data.num_features() <= num_features {
        data.with_num_features(num_features)
    } else {
        Err(Error::invalid(format!(
            "data uses {} features, model has {num_features}",
            data.num_features()
        )))
    }
}

fn hidden_width(h: &HiddenMaxentModel) -> usize {
    match &h.emitters {
        Emitters::Maxent(ms) => ms[0].num_features(),
        Emitters::Deterministic(_) => h.selector.num_features() / h.num_hidden().max(1),
    }
}

/// The conditional distribution a model assigns to one event.
fn predict(model: &ModelFile, e: &EventBlock) -> Result<Distribution> {
    match model {
        ModelFile::Maxent { model, .. } => maxent::evaluate(model, e),
        ModelFile::Hidden(h) => hv_evaluate(h, &expand_block(e, h.num_hidden(), hidden_width(h))?),
        ModelFile::Memm(_) => Err(Error::invalid("MEMM models apply to sequence files")),
    }
}

fn model_width(model: &ModelFile) -> usize {
    match model {
        ModelFile::Maxent { model, .. } => model.num_features(),
        ModelFile::Hidden(h) => hidden_width(h),
        ModelFile::Memm(m) => m.num_features,
    }
}

fn print_trace(out: &mut dyn Write, trace: &TrainTrace) -> Result<()> {
    for (i, ll) in trace.log_likelihood.iter().enumerate() {
        kv(out, &format!("ll.{i}"), fmt_e(*ll))?;
    }
    kv(out, "iterations", trace.iterations)?;
    kv(out, "converged", trace.converged)?;
    if let Some(r) = trace.final_residual() {
        kv(out, "residual", fmt_e(r))?;
    }
    Ok(())
}

/// Runs an already parsed command.
pub fn execute(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train {
            method,
            data,
            out: path,
            train,
            rotate,
        } => {
            let data = load_events(&data, err)?;
            let opts = train.options();
            let model = match method {
                Method::Gis => {
                    let (m, trace) = maxent::train_gis_pruned(&data, &opts)?;
                    print_trace(out, &trace)?;
                    m
                }
                Method::Fb => {
                    let (pruned, remap) = maxent::prune_unobserved(&data);
                    let hmm_opts = ViaHmmOptions {
                        rotate,
                        random_init: train.seed.is_some(),
                        reference: None,
                    };
                    let (m, report) = reduction::train_maxent_via_hmm(&pruned, &opts, &hmm_opts)?;
                    print_trace(out, &report.trace)?;
                    kv(out, "groups", report.num_groups)?;
                    kv(out, "anti_indicators", report.num_anti_indicators)?;
                    kv(out, "f_sharp", report.f_sharp)?;
                    remap.expand(&m)
                }
            };
            kv(out, "log_likelihood", fmt_e(maxent::log_likelihood(&model, &data)?))?;
            write_file(&path, &io::write_model(&ModelFile::plain(model)))
        }
        Command::Eval { model, data, report } => {
            let model = io::read_model(&model)?;
            let data = align(load_events(&data, err)?, model_width(&model))?;
            let mut ll = 0.0;
            let mut correct = 0usize;
            for e in data.events() {
                let d = predict(&model, e)?;
                ll += d.get(e.true_label()).unwrap_or(0.0).ln();
                if d.argmax() == Some(e.true_label()) {
                    correct += 1;
                }
            }
            kv(out, "events", data.len())?;
            if report != Report::Acc {
                kv(out, "log_likelihood", fmt_e(ll))?;
                kv(out, "mean_log_likelihood", fmt_e(ll / data.len().max(1) as f64))?;
            }
            if report != Report::Ll {
                kv(out, "accuracy", fmt_e(correct as f64 / data.len().max(1) as f64))?;
            }
            Ok(())
        }
        Command::Check { model, data } => {
            let (model, _) = plain_model(io::read_model(&model)?)?;
            let data = align(load_events(&data, err)?, model.num_features())?;
            let (pruned, remap) = maxent::prune_unobserved(&data);
            let kept = MaxentModel::new(
                remap
                    .map
                    .iter()
                    .enumerate()
                    .filter_map(|(i, j)| j.map(|_| model.weight(i)))
                    .collect(),
            )?;
            kv(out, "unobserved_features", data.num_features() - remap.num_kept)?;
            kv(out, "residual", fmt_e(maxent::constraint_residual(&kept, &pruned)?))
        }
        Command::Transform {
            model,
            data,
            op,
            out: path,
        } => {
            let (model, partition) = plain_model(io::read_model(&model)?)?;
            let data = load_events(&data, err)?;
            let result = match op {
                Op::Group => {
                    let data = align(data, model.num_features())?;
                    let part = transforms::partition_exclusive(&data);
                    let (m, _, full) = transforms::complete_groups(&model, &data, &part)?;
                    ModelFile::Maxent {
                        model: m,
                        partition: Some(full),
                    }
                }
                Op::Subunit => {
                    let part = partition
                        .ok_or_else(|| Error::invalid("subunit needs a grouped model; run --op group first"))?;
                    let completed = transforms::materialize_groups(&data, &part)?;
                    part.verify(&completed)?;
                    ModelFile::Maxent {
                        model: transforms::to_subunit(&model, &part)?,
                        partition: Some(part),
                    }
                }
                Op::Strip => {
                    let part =
                        partition.ok_or_else(|| Error::invalid("strip needs a grouped model; run --op group first"))?;
                    let completed = transforms::materialize_groups(&data, &part)?;
                    let (m, _) = transforms::strip_anti_indicators(&model, &completed, &part)?;
                    ModelFile::plain(m)
                }
            };
            if let ModelFile::Maxent { model, partition } = &result {
                kv(out, "features", model.num_features())?;
                kv(out, "max_weight", fmt_e(model.max_weight()))?;
                if let Some(p) = partition {
                    kv(out, "groups", p.groups.len())?;
                    kv(out, "anti_indicators", p.anti_ids.len())?;
                }
            }
            write_file(&path, &io::write_model(&result))
        }
        Command::Compare { models, data } => {
            let [a, b] = models.as_slice() else {
                return Err(Error::invalid("compare takes exactly two --model arguments"));
            };
            let (a, b) = (io::read_model(a)?, io::read_model(b)?);
            let data = align(load_events(&data, err)?, model_width(&a).max(model_width(&b)))?;
            let mut worst: f64 = 0.0;
            for e in data.events() {
                worst = worst.max(predict(&a, e)?.total_variation(&predict(&b, e)?));
            }
            kv(out, "max_tv", fmt_e(worst))
        }
        Command::HvTrain {
            data,
            hidden: k,
            method,
            out: path,
            train,
        } => {
            let data = load_events(&data, err)?;
            let hd = hidden::expand_dataset(&data, k)?;
            let init = hidden::hv_init(&hd, train.seed.unwrap_or(0));
            let opts = train.options();
            let (model, trace) = match method {
                HvMethod::Fb => hidden::train_hv_fb(&hd, &init, &opts)?,
                HvMethod::Em => hidden::train_hv_em_gis(&hd, &init, &opts)?,
            };
            print_trace(out, &trace)?;
            kv(out, "log_likelihood", fmt_e(hidden::hv_log_likelihood(&model, &hd)?))?;
            write_file(&path, &io::write_model(&ModelFile::Hidden(model)))
        }
        Command::Synth {
            gen,
            seed,
            events,
            out: path,
            truth,
            outputs,
            templates,
            hidden,
        } => {
            let spec = SynthSpec {
                kind: match gen {
                    Gen::Plain => GeneratorKind::Plain,
                    Gen::Hv => GeneratorKind::Hidden,
                },
                num_outputs: outputs,
                template_sizes: templates,
                num_hidden: hidden,
                num_events: events,
                seed,
            };
            let (data, model) = synth::synth_generate(&spec)?;
            write_file(&path, &io::write_events(&data))?;
            let mf = match model {
                TruthModel::Plain(m) => ModelFile::plain(m),
                TruthModel::Hidden(h) => ModelFile::Hidden(h),
            };
            write_file(&truth, &io::write_model(&mf))?;
            kv(out, "events", data.len())?;
            kv(out, "features", data.num_features())
        }
        Command::MemmTrain { data, out: path, train } => {
            let parsed = io::read_seq(&data)?;
            for w in &parsed.warnings {
                writeln!(err, "warning: {}: {w}", data.display())?;
            }
            let (model, traces) = seq::train_memm(&parsed.value, &train.options())?;
            for (state, trace) in &traces {
                kv(out, &format!("iterations.{state}"), trace.iterations)?;
                if let Some(r) = trace.final_residual() {
                    kv(out, &format!("residual.{state}"), fmt_e(r))?;
                }
            }
            write_file(&path, &io::write_model(&ModelFile::Memm(model)))
        }
        Command::MemmDecode { model, data } => {
            let ModelFile::Memm(model) = io::read_model(&model)? else {
                return Err(Error::invalid("expected a MEMM model"));
            };
            let parsed = io::read_seq(&data)?;
            for w in &parsed.warnings {
                writeln!(err, "warning: {}: {w}", data.display())?;
            }
            let (mut hits, mut scored) = (0usize, 0usize);
            for (id, blocks) in parsed.value.sequences() {
                let lattice = MemmLattice::from_blocks(&blocks)?;
                let (path, prob) = seq::memm_decode(&model, &lattice, None)?;
                kv(out, &format!("path.{id}"), path.join(","))?;
                kv(out, &format!("prob.{id}"), fmt_e(prob))?;
                for (t, state) in path.iter().enumerate() {
                    if let Some(gold) = agreed_gold(&blocks, t + 1) {
                        scored += 1;
                        hits += usize::from(gold == state);
                    }
                }
            }
            if scored > 0 {
                kv(out, "accuracy", fmt_e(hits as f64 / scored as f64))?;
            }
            Ok(())
        }
    }
}

/// The gold next state at `position`, when every block there agrees on it.
fn agreed_gold(blocks: &[seq::SeqEventBlock], position: usize) -> Option<&str> {
    let mut golds = blocks
        .iter()
        .filter(|b| b.position == position)
        .map(|b| b.gold_next.as_str());
    let first = golds.next()?;
    golds.all(|g| g == first).then_some(first)
}
