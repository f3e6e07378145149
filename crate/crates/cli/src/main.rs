//! `geoaudit` command line: audit a database against ground truth, bound
//! its best-case performance, simulate ad-campaign buying strategies, and
//! generate synthetic worlds to do all of that reproducibly.

mod config;

use clap::{Parser, Subcommand};
use config::RunConfig;
use geoaudit_core::anchor::NearestAnchorIndex;
use geoaudit_core::campaign::{
    batch_simulate, build_ground_truth_bids, normalized_costs, parse_bids, write_decision_table,
    BatchConfig, CampaignError, CostModel, Mode,
};
use geoaudit_core::events::{write_unmatched, UrbanizationMap};
use geoaudit_core::ip::load_series_index;
use geoaudit_core::report::{
    accuracy_table_csv, cdf_csv, optimal_errors_csv, precision_table_csv, report_json,
    sanitize_for_filename, series_anchor_set, write_atomic, AuditError, AuditOptions, Provenance,
};
use geoaudit_core::synth::{generate_world, WorldConfig};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

const EXIT_INPUT: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser)]
#[command(name = "geoaudit", version, about = "GeoIP database audit toolkit")]
struct Cli {
    /// Run configuration (TOML). For `synth` this is a world recipe.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Force the output directory instead of a fresh timestamped one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the spatial grid resolution.
    #[arg(long = "grid-res", global = true)]
    grid_res: Option<u8>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Join ground-truth events against snapshots and report precision,
    /// accuracy, correlation, and stability metrics.
    Audit,
    /// Emit only the nearest-anchor upper-bound section.
    Upperbound,
    /// Run the campaign scenario grid over the bid stream.
    Simulate {
        /// Scenario grid (TOML).
        #[arg(long)]
        scenarios: PathBuf,
    },
    /// Generate a synthetic world with planted ground truth.
    Synth,
    /// Parse and validate every configured input, then exit.
    Validate,
}

struct Failure {
    code: &'static str,
    detail: String,
    exit: u8,
}

impl Failure {
    fn input(code: &'static str, detail: impl Into<String>) -> Self {
        Failure {
            code,
            detail: detail.into(),
            exit: EXIT_INPUT,
        }
    }

    fn internal(detail: impl Into<String>) -> Self {
        Failure {
            code: "internal",
            detail: detail.into(),
            exit: EXIT_INTERNAL,
        }
    }
}

impl From<AuditError> for Failure {
    fn from(e: AuditError) -> Self {
        match e {
            AuditError::MissingInput(what) => Failure::input("missing_input", what),
            AuditError::Json(e) => Failure::internal(e.to_string()),
            other => Failure::input("input_error", other.to_string()),
        }
    }
}

impl From<CampaignError> for Failure {
    fn from(e: CampaignError) -> Self {
        Failure::input("input_error", e.to_string())
    }
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    write_atomic(path, bytes).map_err(|e| Failure::internal(format!("writing {path:?}: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!(
                "{}",
                serde_json::json!({"error": "config_error", "detail": e.to_string()})
            );
            return ExitCode::from(EXIT_INPUT);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!(
                "{}",
                serde_json::json!({"error": failure.code, "detail": failure.detail})
            );
            ExitCode::from(failure.exit)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Audit => cmd_audit(cli, false),
        Command::Upperbound => cmd_audit(cli, true),
        Command::Simulate { scenarios } => cmd_simulate(cli, scenarios),
        Command::Synth => cmd_synth(cli),
        Command::Validate => cmd_validate(cli),
    }
}

/// Load the run config, apply flag overrides, and return it with its
/// canonical bytes (the provenance hash input) and base directory.
fn load_run_config(cli: &Cli) -> Result<(RunConfig, PathBuf, Vec<u8>), Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::input("missing_input", "config"))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::input("missing_input", format!("config ({e})")))?;
    let mut config = RunConfig::load(&text).map_err(|e| Failure::input("config_error", e))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(res) = cli.grid_res {
        config.analysis.grid_resolution = res;
    }
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let canonical = serde_json::to_vec(&config).map_err(|e| Failure::internal(e.to_string()))?;
    Ok((config, base, canonical))
}

/// The forced --out directory, or a fresh timestamped one under the
/// configured output root.
fn resolve_out_dir(cli: &Cli, config_dir: &Path, command: &str) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    let epoch = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    config_dir.join(format!("{epoch}-{command}"))
}

fn audit_options(config: &RunConfig) -> AuditOptions {
    AuditOptions {
        grid_resolution: config.analysis.grid_resolution,
        levels: config.analysis.levels.clone(),
        include_upper_bound: config.analysis.upper_bound,
        max_invalid_fraction: config.analysis.max_invalid_fraction,
        window: config.analysis.window,
    }
}

fn cmd_audit(cli: &Cli, upper_bound_only: bool) -> Result<(), Failure> {
    let (config, base, canonical) = load_run_config(cli)?;
    let paths = config
        .audit_paths(&base)
        .map_err(|what| Failure::input("missing_input", what))?;
    let mut options = audit_options(&config);
    if upper_bound_only {
        options.include_upper_bound = true;
    }
    let provenance = Provenance::new(&canonical, config.seed);
    let outcome = geoaudit_core::report::run_audit(&paths, &options, provenance.clone())?;
    let out = resolve_out_dir(
        cli,
        &config.output.dir,
        if upper_bound_only {
            "upperbound"
        } else {
            "audit"
        },
    );

    if upper_bound_only {
        let section = serde_json::json!({
            "provenance": provenance,
            "upper_bound": outcome.report.upper_bound,
            "notes": outcome.report.notes,
        });
        let body =
            serde_json::to_string_pretty(&section).map_err(|e| Failure::internal(e.to_string()))?;
        write_output(
            &out.join("upper_bound.json"),
            format!("{body}\n").as_bytes(),
        )?;
    } else {
        write_output(
            &out.join("report.json"),
            report_json(&outcome.report)?.as_bytes(),
        )?;
        write_output(
            &out.join("precision_quantiles.csv"),
            precision_table_csv(&outcome.report).as_bytes(),
        )?;
        write_output(
            &out.join("accuracy.csv"),
            accuracy_table_csv(&outcome.report).as_bytes(),
        )?;

        let mut unmatched = Vec::new();
        unmatched.extend_from_slice(provenance.header_line().as_bytes());
        unmatched.push(b'\n');
        write_unmatched(&outcome.join.unmatched, &mut unmatched)
            .map_err(|e| Failure::internal(e.to_string()))?;
        write_output(&out.join("unmatched.csv"), &unmatched)?;

        for (dim, groups) in &outcome.report.precision {
            for (group, dist) in groups {
                let name = format!("cdf_{dim}_{}.csv", sanitize_for_filename(group));
                write_output(&out.join(name), cdf_csv(&provenance, dist).as_bytes())?;
            }
        }
    }

    if let Some(assignments) = &outcome.optimal {
        let body = optimal_errors_csv(&provenance, &outcome.join.samples, assignments);
        write_output(&out.join("optimal_errors.csv"), body.as_bytes())?;
    }

    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_simulate(cli: &Cli, scenarios_path: &Path) -> Result<(), Failure> {
    let (config, base, canonical) = load_run_config(cli)?;
    let scenario_text = std::fs::read_to_string(scenarios_path)
        .map_err(|e| Failure::input("missing_input", format!("scenarios ({e})")))?;
    let mut batch: BatchConfig = toml::from_str(&scenario_text)
        .map_err(|e| Failure::input("config_error", e.to_string()))?;
    if let Some(seed) = cli.seed {
        batch.seed = seed;
    }

    let paths = config
        .audit_paths(&base)
        .map_err(|what| Failure::input("missing_input", what))?;
    let bidstream = config
        .bidstream_path(&base)
        .ok_or_else(|| Failure::input("missing_input", "bidstream"))?;
    if !bidstream.exists() {
        return Err(Failure::input("missing_input", "bidstream"));
    }

    let series_list = load_series_index(&paths.snapshots_index)
        .map_err(|e| Failure::input("input_error", e.to_string()))?;
    if series_list.is_empty() {
        return Err(Failure::input("missing_input", "snapshots"));
    }
    let regions = geoaudit_core::region::RegionIndex::build(
        geoaudit_core::region::regions_from_geojson(
            &std::fs::read_to_string(&paths.regions)
                .map_err(|e| Failure::input("missing_input", format!("regions ({e})")))?,
        )
        .map_err(|e| Failure::input("input_error", e.to_string()))?,
        config.analysis.grid_resolution,
    )
    .map_err(|e| Failure::input("input_error", e.to_string()))?;
    let urbanization = match &paths.urbanization {
        Some(path) => UrbanizationMap::from_reader(
            std::fs::File::open(path)
                .map_err(|e| Failure::input("missing_input", format!("urbanization ({e})")))?,
        )
        .map_err(|e| Failure::input("input_error", e.to_string()))?,
        None => UrbanizationMap::empty(),
    };

    let bid_file = std::fs::File::open(&bidstream)
        .map_err(|e| Failure::input("missing_input", format!("bidstream ({e})")))?;
    let ingest = parse_bids(bid_file, config.analysis.max_invalid_fraction)?;

    let side_series = match batch.db_side {
        geoaudit_core::campaign::DbSide::A => &series_list[0],
        geoaudit_core::campaign::DbSide::B => series_list
            .get(1)
            .ok_or_else(|| Failure::input("missing_input", "second snapshot series"))?,
    };
    let enrichment = build_ground_truth_bids(&ingest.bids, &series_list[0], series_list.get(1));

    // The stream-derived cost model is only required when some scenario
    // does not override it.
    let needs_stream_costs = batch.scenarios.iter().any(|s| s.cost_override.is_none());
    let default_costs = if needs_stream_costs {
        normalized_costs(&ingest.bids)?
    } else {
        CostModel::from_raw(1.0, 1.0).expect("unit costs are valid")
    };

    let needs_index = batch.modes.contains(&Mode::Optimal);
    let anchor_index = if needs_index {
        let anchors = series_anchor_set(side_series)
            .map_err(|e| Failure::input("input_error", e.to_string()))?;
        Some(
            NearestAnchorIndex::build(&anchors)
                .map_err(|e| Failure::input("input_error", e.to_string()))?,
        )
    } else {
        None
    };

    let result = batch_simulate(
        &batch,
        &enrichment.enriched,
        &default_costs,
        &regions,
        &urbanization,
        anchor_index.as_ref(),
    )?;

    let mut provenance_input = canonical;
    provenance_input.extend_from_slice(scenario_text.as_bytes());
    let provenance = Provenance::new(&provenance_input, batch.seed);

    let out = resolve_out_dir(cli, &config.output.dir, "simulate");
    let mut table = Vec::new();
    table.extend_from_slice(provenance.header_line().as_bytes());
    table.push(b'\n');
    write_decision_table(&result.table, &mut table)?;
    write_output(&out.join("decision_table.csv"), &table)?;

    let detail = serde_json::json!({
        "provenance": provenance,
        "dropped_by_source": enrichment.dropped_by_source,
        "enriched_bids": enrichment.enriched.len(),
        "table": result.table,
        "campaigns": result.campaigns,
    });
    let body =
        serde_json::to_string_pretty(&detail).map_err(|e| Failure::internal(e.to_string()))?;
    write_output(&out.join("campaigns.json"), format!("{body}\n").as_bytes())?;

    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_synth(cli: &Cli) -> Result<(), Failure> {
    let mut world_config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::input("missing_input", format!("config ({e})")))?;
            toml::from_str::<WorldConfig>(&text)
                .map_err(|e| Failure::input("config_error", e.to_string()))?
        }
        None => WorldConfig::default(),
    };
    if let Some(seed) = cli.seed {
        world_config.seed = seed;
    }
    if let Some(res) = cli.grid_res {
        world_config.urbanization_resolution = res;
    }
    let out = resolve_out_dir(cli, Path::new("runs"), "synth");
    let world = generate_world(&world_config, &out)
        .map_err(|e| Failure::input("input_error", e.to_string()))?;
    println!(
        "wrote {} ({} events, {} files)",
        world.dir.display(),
        world.planted.event_count,
        world.manifest.files.len()
    );
    Ok(())
}

fn cmd_validate(cli: &Cli) -> Result<(), Failure> {
    let (config, base, _) = load_run_config(cli)?;
    let paths = config
        .audit_paths(&base)
        .map_err(|what| Failure::input("missing_input", what))?;
    paths.check().map_err(Failure::from)?;

    let series_list = load_series_index(&paths.snapshots_index)
        .map_err(|e| Failure::input("input_error", e.to_string()))?;
    let regions = geoaudit_core::region::regions_from_geojson(
        &std::fs::read_to_string(&paths.regions)
            .map_err(|e| Failure::input("missing_input", format!("regions ({e})")))?,
    )
    .map_err(|e| Failure::input("input_error", e.to_string()))?;
    for region in &regions {
        region
            .validate()
            .map_err(|e| Failure::input("input_error", e.to_string()))?;
    }
    let urbanization_cells = match &paths.urbanization {
        Some(path) => UrbanizationMap::from_reader(
            std::fs::File::open(path)
                .map_err(|e| Failure::input("missing_input", format!("urbanization ({e})")))?,
        )
        .map_err(|e| Failure::input("input_error", e.to_string()))?
        .len(),
        None => 0,
    };
    let ingest = geoaudit_core::events::ingest_events(
        std::fs::File::open(&paths.events)
            .map_err(|e| Failure::input("missing_input", format!("events ({e})")))?,
        config.analysis.max_invalid_fraction,
        config.analysis.window,
    )
    .map_err(|e| Failure::input("input_error", e.to_string()))?;
    let bids = match config.bidstream_path(&base) {
        Some(path) => {
            let file = std::fs::File::open(&path)
                .map_err(|e| Failure::input("missing_input", format!("bidstream ({e})")))?;
            Some(
                parse_bids(file, config.analysis.max_invalid_fraction)?
                    .bids
                    .len(),
            )
        }
        None => None,
    };

    let summary = serde_json::json!({
        "snapshots": series_list.iter().map(|s| s.snapshots().len()).sum::<usize>(),
        "providers": series_list.len(),
        "ranges": series_list
            .iter()
            .flat_map(|s| s.snapshots())
            .map(|s| s.ranges().len())
            .sum::<usize>(),
        "regions": regions.len(),
        "urbanization_cells": urbanization_cells,
        "events": ingest.events.len(),
        "rejected_events": ingest.rejects.len(),
        "bids": bids,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    Ok(())
}
