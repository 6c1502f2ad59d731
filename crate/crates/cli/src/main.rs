use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dcmesh::group::SecurityLevel;
use dcmesh::sim::{run_scenario, verify_transcript, RunOutput, Scenario, TranscriptError};
use dcmesh::splitter::{NodeKind, ResolutionTree};

const EXIT_CONFIG: u8 = 1;
const EXIT_FINDING: u8 = 2;

/// Five senders whose collision tree is fully known in advance.
const REFERENCE_SCENARIO: &str = r#"
n = 5
seed = 0
senders = [
  { participant = 0, payload = 36 },
  { participant = 1, payload = 11 },
  { participant = 2, payload = 28 },
  { participant = 3, payload = 17 },
  { participant = 4, payload = 38 },
]
"#;

/// (node, count, sum, threshold if split)
const REFERENCE_TREE: &[(u64, u64, u64, Option<u64>)] = &[
    (1, 5, 130, Some(26)),
    (2, 2, 28, Some(14)),
    (3, 3, 102, Some(34)),
    (4, 1, 11, None),
    (5, 1, 17, None),
    (6, 1, 28, None),
    (7, 2, 74, Some(37)),
    (14, 1, 36, None),
    (15, 1, 38, None),
];
const REFERENCE_TRANSMITTED: &[u64] = &[1, 2, 4, 6, 14];

#[derive(Parser, Debug)]
#[command(name = "dcmesh", version, about = "Run and check DC-net collision resolution scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Print per-round detail.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario file and write its transcript.
    Run {
        scenario: PathBuf,
        #[arg(short, long, default_value = "transcript.jsonl")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        group: Option<GroupArg>,
    },
    /// Replay a transcript and report the first divergence.
    Verify { transcript: PathBuf },
    /// Run the built-in five-sender example and compare with the reference tree.
    WorkedExample {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        group: Option<GroupArg>,
        /// Also write the transcript here.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Write the embedded scenario file here and exit.
        #[arg(long)]
        emit_scenario: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GroupArg {
    TestSmall,
    Test,
    Production,
}

impl From<GroupArg> for SecurityLevel {
    fn from(g: GroupArg) -> Self {
        match g {
            GroupArg::TestSmall => SecurityLevel::TestSmall,
            GroupArg::Test => SecurityLevel::Test,
            GroupArg::Production => SecurityLevel::Production,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { scenario, out, seed, group } => cmd_run(&scenario, &out, seed, group, cli.verbose),
        Command::Verify { transcript } => cmd_verify(&transcript),
        Command::WorkedExample { seed, group, out, emit_scenario } => match emit_scenario {
            Some(path) => write_or_fail(&path, REFERENCE_SCENARIO.trim_start()),
            None => cmd_worked_example(seed, group, out.as_deref(), cli.verbose),
        },
    };
    ExitCode::from(code)
}

fn write_or_fail(path: &Path, text: &str) -> u8 {
    match fs::write(path, text) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: cannot write {}: {e}", path.display());
            EXIT_CONFIG
        }
    }
}

fn apply_overrides(scenario: &mut Scenario, seed: Option<u64>, group: Option<GroupArg>) {
    if let Some(s) = seed {
        scenario.seed = s;
    }
    if let Some(g) = group {
        scenario.group = g.into();
    }
}

fn execute(scenario: &Scenario, out: Option<&Path>, verbose: bool) -> Result<RunOutput, u8> {
    let output = run_scenario(scenario).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })?;
    if let Some(path) = out {
        let code = write_or_fail(path, &output.transcript.to_text());
        if code != 0 {
            return Err(code);
        }
    }
    print_stats(&output, verbose);
    Ok(output)
}

fn cmd_run(path: &Path, out: &Path, seed: Option<u64>, group: Option<GroupArg>, verbose: bool) -> u8 {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return EXIT_CONFIG;
        }
    };
    let mut scenario = match Scenario::from_toml(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return EXIT_CONFIG;
        }
    };
    apply_overrides(&mut scenario, seed, group);
    match execute(&scenario, Some(out), verbose) {
        Ok(o) if o.summary.verdicts.is_empty() => 0,
        Ok(_) => EXIT_FINDING,
        Err(code) => code,
    }
}

fn print_stats(output: &RunOutput, verbose: bool) {
    let s = &output.summary;
    let rounds = s.stats.transmitted_rounds;
    println!(
        "{} messages / {} {}",
        s.delivered.len(),
        rounds,
        if rounds == 1 { "round" } else { "transmitted rounds" }
    );
    println!(
        "proofs: {} verified, {} failed, {} missing",
        s.stats.proofs_verified, s.stats.proofs_failed, s.stats.proofs_missing
    );
    println!("epochs: {}  status: {:?}", s.stats.epochs, s.status);
    for v in &s.verdicts {
        println!("verdict: {v}");
    }
    if !output.undelivered.is_empty() {
        println!("undelivered: {:?}", output.undelivered);
    }
    if verbose {
        for d in &s.delivered {
            println!("delivered: epoch {} node {} payload {}", d.epoch, d.node, d.payload);
        }
        for line in output.transcript.lines() {
            println!("{line}");
        }
    }
}

fn cmd_verify(path: &Path) -> u8 {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return EXIT_CONFIG;
        }
    };
    match verify_transcript(&text) {
        Err(TranscriptError::MalformedRecord { index, reason }) => {
            eprintln!("malformed transcript at record {index}: {reason}");
            EXIT_CONFIG
        }
        Ok(report) => match report.first_divergence() {
            None => {
                println!("ok: {} records replayed, no divergence", report.records);
                0
            }
            Some(d) => {
                println!("divergence at record {}: {}", d.index, d.detail);
                if let Some(line) = text.lines().nth(d.index) {
                    println!("{line}");
                }
                println!("{} divergent records in total", report.divergences.len());
                EXIT_FINDING
            }
        },
    }
}

fn print_tree(tree: &ResolutionTree) {
    for node in tree.nodes() {
        let depth = 63 - node.id.leading_zeros() as usize;
        let kind = match node.kind {
            NodeKind::Root => "root",
            NodeKind::Transmitted => "sent",
            NodeKind::Inferred => "inferred",
        };
        let slot = match &node.slot {
            Some(s) => format!("({},{})", s.count, s.sum),
            None => "(?)".to_string(),
        };
        let threshold = node.threshold.as_ref().map(|t| format!(" t={t}")).unwrap_or_default();
        println!("{}{:>3} {:<8} {}{} {:?}", "  ".repeat(depth), node.id, kind, slot, threshold, node.status);
    }
}

fn tree_matches(tree: &ResolutionTree) -> Vec<String> {
    let mut errs = Vec::new();
    for &(id, count, sum, threshold) in REFERENCE_TREE {
        let Some(node) = tree.node(id) else {
            errs.push(format!("node {id} missing"));
            continue;
        };
        match &node.slot {
            Some(s) if s.count == count && s.sum == sum.into() => {}
            other => errs.push(format!("node {id}: expected ({count},{sum}), got {other:?}")),
        }
        if node.threshold != threshold.map(Into::into) {
            errs.push(format!("node {id}: expected threshold {threshold:?}, got {:?}", node.threshold));
        }
    }
    if tree.nodes().count() != REFERENCE_TREE.len() {
        errs.push(format!("expected {} nodes, got {}", REFERENCE_TREE.len(), tree.nodes().count()));
    }
    if tree.transmitted_rounds() != REFERENCE_TRANSMITTED {
        errs.push(format!("transmitted rounds {:?}", tree.transmitted_rounds()));
    }
    errs
}

fn cmd_worked_example(seed: Option<u64>, group: Option<GroupArg>, out: Option<&Path>, verbose: bool) -> u8 {
    let mut scenario = Scenario::from_toml(REFERENCE_SCENARIO).expect("embedded scenario parses");
    apply_overrides(&mut scenario, seed, group);
    let output = match execute(&scenario, out, verbose) {
        Ok(o) => o,
        Err(code) => return code,
    };
    let Some(tree) = output.trees.first() else {
        println!("FAIL: no tree");
        return EXIT_FINDING;
    };
    print_tree(tree);
    let mut errs = tree_matches(tree);
    if !output.summary.verdicts.is_empty() {
        errs.push("unexpected verdicts".to_string());
    }
    if errs.is_empty() {
        println!("PASS");
        0
    } else {
        for e in &errs {
            println!("mismatch: {e}");
        }
        println!("FAIL");
        EXIT_FINDING
    }
}
