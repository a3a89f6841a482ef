//! One function per subcommand. Each writes its run directory and returns the
//! summary it wrote.

use std::path::{Path, PathBuf};
use std::time::Duration;

use ionnet::analysis::{
    bell_fidelity, correlations, error_budget, fit_coherence, phi_plus_fidelity, read_csv_rows, simulate_coherence, tomography, CoherencePoint,
};
use ionnet::calibration::calibrate_presets;
use ionnet::config::{to_toml_string, LoadedConfig};
use ionnet::protocol::campaign::{enhancement_sweep, run_campaign, run_ion_photon, CampaignOptions, CampaignResult, LinkModel};
use ionnet::protocol::engine::SimRng;
use ionnet::protocol::station::{Loopback, SocketLink, StationConfig, StationServer};
use ionnet::qstate::{fidelity_pure, phi_plus, psi_plus, DensityMatrix};
use ionnet::{analysis, phase};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::output::{run_metadata, RunDir};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    Loopback,
    Socket,
}

impl Transport {
    pub fn name(self) -> &'static str {
        match self {
            Transport::Loopback => "loopback",
            Transport::Socket => "socket",
        }
    }
}

fn link_of(loaded: &LoadedConfig) -> Result<LinkModel, CliError> {
    loaded.config.link_model().map_err(CliError::Config)
}

fn rng_for(seed: u64, stream: u64) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Serialize)]
struct BudgetCsvRow<'a> {
    row: &'a str,
    infidelity_percent: f64,
}

pub fn cmd_budget(loaded: &LoadedConfig, out: &Path) -> Result<Value, CliError> {
    let dir = RunDir::create(out, run_metadata(loaded, "budget"))?;
    let b = error_budget(&loaded.config.budget, loaded.config.scenario.name());
    let rows: Vec<BudgetCsvRow> = b.rows.iter().map(|r| BudgetCsvRow { row: &r.name, infidelity_percent: round_pct(r.value) }).collect();
    dir.write_csv("budget.csv", &rows)?;
    for r in &rows {
        println!("{:<22}{:>6.2} %", r.row, r.infidelity_percent);
    }
    println!("{:<22}{:>6.2} %", "total", round_pct(b.total));
    dir.write_summary(json!({
        "label": b.label,
        "rows": b.rows.iter().map(|r| json!({ "row": r.name, "infidelity_percent": round_pct(r.value) })).collect::<Vec<_>>(),
        "total_percent": round_pct(b.total),
        "implied_fidelity": 1.0 - b.total,
    }))
}

/// Percent, rounded to 1e-9 so that float noise never shows in the table.
fn round_pct(frac: f64) -> f64 {
    (frac * 100.0 * 1e9).round() / 1e9
}

#[derive(Serialize)]
struct RecordRow {
    job: usize,
    block: u32,
    round: u16,
    mode: u8,
    basis: String,
    outcome_a: i8,
    outcome_b: i8,
}

#[derive(Serialize)]
struct MatrixRow {
    row: usize,
    col: usize,
    re: f64,
    im: f64,
}

fn matrix_rows(rho: &DensityMatrix) -> Vec<MatrixRow> {
    let n = rho.dim();
    (0..n * n).map(|k| (k / n, k % n)).map(|(i, j)| MatrixRow { row: i, col: j, re: rho.entry(i, j).re, im: rho.entry(i, j).im }).collect()
}

pub fn cmd_ion_photon(loaded: &LoadedConfig, out: &Path, shots: Option<u64>) -> Result<Value, CliError> {
    let link = link_of(loaded)?;
    let shots = shots.unwrap_or(loaded.config.ion_photon.shots);
    let dir = RunDir::create(out, run_metadata(loaded, "ion-photon"))?;
    let (model, records) = run_ion_photon(&link, shots, &mut rng_for(loaded.config.seed, 0));
    let rows: Vec<RecordRow> = records
        .iter()
        .map(|r| RecordRow { job: 0, block: r.block, round: r.round, mode: r.mode, basis: r.basis.to_string(), outcome_a: r.outcome_a, outcome_b: r.outcome_b })
        .collect();
    dir.write_csv("records.csv", &rows)?;
    let rho = tomography(&records).map_err(runtime)?;
    dir.write_csv("tomogram.csv", &matrix_rows(&rho))?;
    let direct = phi_plus_fidelity(&records).map_err(runtime)?;
    let tomo_f = fidelity_pure(&rho, &phi_plus()).map_err(runtime)?;
    let model_f = fidelity_pure(&model, &phi_plus()).map_err(runtime)?;
    println!("ion-photon fidelity {:.4} ± {:.4} (tomogram {:.4}, model {:.4})", direct.fidelity, direct.stderr, tomo_f, model_f);
    dir.write_summary(json!({
        "target": "phi_plus",
        "shots_per_basis": shots,
        "fidelity": direct.fidelity,
        "stderr": direct.stderr,
        "xx": direct.xx, "yy": direct.yy, "zz": direct.zz,
        "tomogram_fidelity": tomo_f,
        "model_fidelity": model_f,
    }))
}

#[derive(Serialize)]
struct SuccessRow {
    job: usize,
    block: u32,
    round: u16,
    mode: u8,
    pattern: String,
    decision_ns: u64,
    delta_tau_ns: Option<i64>,
    dark_involved: bool,
    nbar_a: f64,
    nbar_b: f64,
    state_fidelity: f64,
}

#[derive(Serialize)]
struct CorrelationRow {
    basis: String,
    n: u64,
    mean: f64,
    stderr: f64,
}

/// One campaign over the chosen transport.
pub fn run_transport(link: &LinkModel, opts: CampaignOptions, transport: Transport, digest: [u8; 32], rng: &mut SimRng) -> Result<CampaignResult, CliError> {
    let cfg = StationConfig { window_ns: link.timing.window_ns, accept_psi_minus: link.accept_psi_minus, reorder_budget_ns: link.reorder_budget_ns, digest };
    match transport {
        Transport::Loopback => {
            let mut st = Loopback::new(cfg).map_err(runtime)?;
            Ok(run_campaign(link, opts, &mut st, rng))
        }
        Transport::Socket => {
            let server = StationServer::spawn(cfg).map_err(runtime)?;
            let mut st = SocketLink::connect(server.addr, digest, Duration::from_secs(10)).map_err(runtime)?;
            let r = run_campaign(link, opts, &mut st, rng);
            st.close();
            server.shutdown();
            Ok(r)
        }
    }
}

pub fn cmd_ion_ion(loaded: &LoadedConfig, out: &Path, events: u64, transport: Transport, jobs: usize) -> Result<Value, CliError> {
    let link = link_of(loaded)?;
    let jobs = jobs.max(1);
    let dir = RunDir::create(out, run_metadata(loaded, "ion-ion"))?;
    let digest = loaded.config.digest_bytes();
    let seed = loaded.config.seed;
    let share = |j: usize| events / jobs as u64 + u64::from((j as u64) < events % jobs as u64);

    let results: Vec<Result<CampaignResult, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let link = &link;
                s.spawn(move || {
                    let opts = CampaignOptions { target_events: share(j), max_blocks: u64::MAX, keep_events: true };
                    run_transport(link, opts, transport, digest, &mut rng_for(seed, j as u64))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(CliError::Runtime("campaign thread panicked".into())))).collect()
    });
    let results: Vec<CampaignResult> = results.into_iter().collect::<Result<_, _>>()?;

    let mut records = Vec::new();
    let mut rec_rows = Vec::new();
    let mut succ_rows = Vec::new();
    let mut faults = Vec::new();
    let (mut blocks, mut executed, mut time_ns, mut dark) = (0u64, 0u64, 0u64, 0usize);
    for (j, r) in results.iter().enumerate() {
        blocks += r.blocks;
        executed += r.executed_blocks;
        time_ns += r.sim_time_ns;
        faults.extend(r.faults.iter().map(|f| format!("job {j}: {f}")));
        for s in &r.successes {
            dark += usize::from(s.dark_involved);
            succ_rows.push(SuccessRow {
                job: j,
                block: s.block,
                round: s.round,
                mode: s.mode,
                pattern: format!("{:?}", s.pattern),
                decision_ns: s.decision_ns,
                delta_tau_ns: s.delta_tau_ns,
                dark_involved: s.dark_involved,
                nbar_a: s.nbar[0],
                nbar_b: s.nbar[1],
                state_fidelity: fidelity_pure(&s.state, &psi_plus()).unwrap_or(f64::NAN),
            });
        }
        for m in &r.records {
            rec_rows.push(RecordRow { job: j, block: m.block, round: m.round, mode: m.mode, basis: m.basis.to_string(), outcome_a: m.outcome_a, outcome_b: m.outcome_b });
        }
        records.extend(r.records.iter().cloned());
    }
    let logs: Vec<_> = results.iter().map(|r| r.log.clone()).collect();
    dir.write_events(&logs)?;
    dir.write_csv("successes.csv", &succ_rows)?;
    dir.write_csv("records.csv", &rec_rows)?;

    let corr: Vec<CorrelationRow> = analysis::bell_bases()
        .iter()
        .filter_map(|b| correlations(&records, std::slice::from_ref(b)).ok().map(|c| c[0].clone()))
        .map(|c| CorrelationRow { basis: c.basis.to_string(), n: c.n, mean: c.mean, stderr: c.stderr })
        .collect();
    dir.write_csv("correlations.csv", &corr)?;

    let successes = succ_rows.len() as u64;
    let sim_time_s = time_ns as f64 * 1e-9;
    let rate = if sim_time_s > 0.0 { successes as f64 / sim_time_s } else { 0.0 };
    let expected = results.first().map(|r| r.expected_rate_hz).unwrap_or(0.0);
    let fid = bell_fidelity(&records).ok();
    match &fid {
        Some(f) => println!("ion-ion fidelity {:.4} ± {:.4} from {successes} events, rate {rate:.4} s⁻¹ (analytic {expected:.4})", f.fidelity, f.stderr),
        None => println!("ion-ion: {successes} events, no fidelity"),
    }
    let summary = dir.write_summary(json!({
        "transport": transport.name(),
        "jobs": jobs,
        "events_requested": events,
        "successes": successes,
        "xx": fid.map(|f| f.xx), "yy": fid.map(|f| f.yy), "zz": fid.map(|f| f.zz),
        "fidelity": fid.map(|f| f.fidelity),
        "stderr": fid.map(|f| f.stderr),
        "rate_hz": rate,
        "expected_rate_hz": expected,
        "false_herald_fraction": if successes > 0 { dark as f64 / successes as f64 } else { 0.0 },
        "blocks": blocks,
        "executed_blocks": executed,
        "sim_time_s": sim_time_s,
        "faults": faults,
    }))?;
    if !faults.is_empty() {
        return Err(CliError::Runtime(format!("{} blocks aborted: {}", faults.len(), faults[0])));
    }
    Ok(summary)
}

pub fn cmd_enhancement(loaded: &LoadedConfig, out: &Path, max_modes: u32, single_mode_successes: u64) -> Result<Value, CliError> {
    if max_modes == 0 {
        return Err(CliError::Usage("--max-modes must be at least 1".into()));
    }
    let link = link_of(loaded)?;
    let dir = RunDir::create(out, run_metadata(loaded, "enhancement"))?;
    let pts = enhancement_sweep(&link, max_modes, single_mode_successes, &mut rng_for(loaded.config.seed, 0));
    dir.write_csv("enhancement.csv", &pts)?;
    for p in &pts {
        println!("N={:<3} E={:.3} ± {:.3} (analytic {:.3})", p.modes, p.enhancement, p.stderr, p.analytic);
    }
    let last = pts.last().expect("max_modes >= 1");
    dir.write_summary(json!({
        "max_modes": max_modes,
        "pump_survival": link.emission.pump_survival,
        "survival_per_cycle": link.emission.survival_per_cycle(),
        "enhancement_max": last.enhancement,
        "stderr_max": last.stderr,
        "analytic_max": last.analytic,
        "monotone": pts.windows(2).all(|w| w[1].enhancement >= w[0].enhancement),
    }))
}

pub fn cmd_coherence(loaded: &LoadedConfig, out: &Path, data: Option<&Path>) -> Result<Value, CliError> {
    let c = &loaded.config.coherence;
    let dir = RunDir::create(out, run_metadata(loaded, "coherence"))?;
    let points: Vec<CoherencePoint> = match data {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
            read_csv_rows(&text).map_err(runtime)?
        }
        None => simulate_coherence(c.t2_ms, &c.delays_ms, c.noise, c.model, &mut rng_for(loaded.config.seed, 0)),
    };
    dir.write_csv("coherence.csv", &points)?;
    let fit = fit_coherence(&points, c.model).map_err(runtime)?;
    match (fit.t2_ms, fit.stderr_ms) {
        (Some(t), Some(se)) => println!("T2 = {t:.1} ± {se:.1} ms ({})", c.model.name()),
        _ => println!("no decay resolved ({})", c.model.name()),
    }
    dir.write_summary(json!({
        "source": if data.is_some() { "file" } else { "synthetic" },
        "injected_t2_ms": if data.is_some() { None } else { Some(c.t2_ms) },
        "model": c.model.name(),
        "t2_ms": fit.t2_ms,
        "stderr_ms": fit.stderr_ms,
        "chi2": fit.chi2,
        "iterations": fit.iterations,
    }))
}

fn scan_file_name(scan: &phase::ParityScan) -> String {
    format!("scan_{}_{:?}.csv", scan.node.name(), scan.basis)
}

pub fn cmd_simulate_scan(loaded: &LoadedConfig, out: &Path) -> Result<Value, CliError> {
    let c = &loaded.config;
    let s = &c.scan;
    let dir = RunDir::create(out, run_metadata(loaded, "simulate-scan"))?;
    let scans = phase::simulate_parity_scans(&c.phase, s.t_ns, s.tau_ns, s.visibility, s.points, s.noise, &mut rng_for(c.seed, 0));
    let mut files = Vec::new();
    for scan in &scans {
        let name = scan_file_name(scan);
        let f = std::fs::File::create(dir.path(&name)).map_err(runtime)?;
        phase::write_scan_csv(std::io::BufWriter::new(f), scan, dir.metadata()).map_err(runtime)?;
        files.push(name);
    }
    let phi_a = phase::phi_e(ionnet::Node::Alice, c.phase.z_h, s.t_ns, s.tau_ns, &c.phase);
    let phi_b = phase::phi_e(ionnet::Node::Bob, c.phase.z_h, s.t_ns, s.tau_ns, &c.phase);
    println!("wrote {} scans", files.len());
    dir.write_summary(json!({
        "files": files,
        "phi_e_a": ionnet::numeric::wrap_pi(phi_a),
        "phi_e_b": ionnet::numeric::wrap_pi(phi_b),
        "calibration_residual": phase::calibration_residual(s.t_ns, s.tau_ns, 0.0, &c.phase),
    }))
}

pub fn cmd_calibrate_phase(loaded: &LoadedConfig, out: &Path, scans: &[PathBuf]) -> Result<Value, CliError> {
    if scans.is_empty() {
        return Err(CliError::Usage("calibrate-phase needs at least one scan CSV".into()));
    }
    let dir = RunDir::create(out, run_metadata(loaded, "calibrate-phase"))?;
    let data: Vec<phase::ParityScan> = scans.iter().map(|p| phase::read_scan_file(p)).collect::<Result<_, _>>().map_err(runtime)?;
    let fit = phase::fit_parity_scans(&data).map_err(runtime)?;
    println!("φ_e(A) = {:.4} ± {:.4} rad, φ_e(B) = {:.4} ± {:.4} rad", fit.phi_e_a, fit.se_a, fit.phi_e_b, fit.se_b);
    let mut body = serde_json::to_value(&fit).map_err(runtime)?;
    body.as_object_mut().expect("object").insert("scans".into(), json!(scans.iter().map(|p| p.display().to_string()).collect::<Vec<_>>()));
    dir.write_summary(body)
}

#[derive(Serialize, Deserialize)]
struct CalibrationRow {
    scenario: String,
    collection_efficiency: f64,
    dark_rate_hz: f64,
    recoil_per_scatter: f64,
    prep_scatters: f64,
}

pub fn cmd_calibrate(loaded: &LoadedConfig, out: &Path, events: u64) -> Result<Value, CliError> {
    let dir = RunDir::create(out, run_metadata(loaded, "calibrate"))?;
    let (short, long, prep) = calibrate_presets(events, loaded.config.seed).ok_or_else(|| CliError::Runtime("calibration did not bracket a solution".into()))?;
    let rows: Vec<CalibrationRow> = [("20m", short), ("1.2km", long)]
        .into_iter()
        .map(|(s, c)| CalibrationRow {
            scenario: s.into(),
            collection_efficiency: c.collection_efficiency,
            dark_rate_hz: c.dark_rate_hz,
            recoil_per_scatter: c.recoil_per_scatter,
            prep_scatters: prep,
        })
        .collect();
    dir.write_csv("calibration.csv", &rows)?;
    for r in &rows {
        println!("{:<6} eta={:.6e} dark={:.4} Hz recoil={:.6} prep_scatters={:.4}", r.scenario, r.collection_efficiency, r.dark_rate_hz, r.recoil_per_scatter, r.prep_scatters);
    }
    dir.write_summary(json!({ "events": events, "calibration": rows }))
}

pub fn cmd_show_config(loaded: &LoadedConfig) -> Result<Value, CliError> {
    print!("{}", to_toml_string(&loaded.config));
    println!("# digest = {}", loaded.config.digest());
    Ok(json!({ "digest": loaded.config.digest() }))
}
