//! Calibration of the link parameters the measured data do not fix directly:
//! pump survival, collection efficiency, dark-count rate and motional heating.

use rand::SeedableRng;

use crate::analysis::heating_visibility;
use crate::config::{target_rate_hz, Calibration, ExperimentConfig};
use crate::emission::EmissionParams;
use crate::numeric::bisect;
use crate::protocol::campaign::{analytic_enhancement, run_campaign, CampaignOptions, LinkModel};
use crate::protocol::engine::SimRng;
use crate::protocol::fastforward::FastForward;
use crate::protocol::station::{Loopback, StationConfig};
use crate::protocol::EngineMode;

/// Pump survival whose `modes`-mode enhancement equals `target`.
pub fn pump_survival_for_enhancement(base: &EmissionParams, modes: u32, target: f64) -> Option<f64> {
    let f = |ps: f64| analytic_enhancement(&EmissionParams { pump_survival: ps, ..base.clone() }, modes) - target;
    bisect(f, 0.0, 1.0, 1e-12)
}

/// Collection efficiency at which the analytic success rate equals `target_hz`.
pub fn efficiency_for_rate(link: &LinkModel, target_hz: f64) -> Option<f64> {
    let f = |log_eta: f64| {
        let mut l = link.clone();
        l.emission.collection_efficiency = log_eta.exp();
        (FastForward::new(&l).expected_rate(&l) / target_hz).ln()
    };
    bisect(f, (1e-7f64).ln(), 0.0, 1e-10).map(f64::exp)
}

/// Fraction of heralds with at least one dark click.
pub fn dark_fraction(link: &LinkModel) -> f64 {
    let ff = FastForward::new(link);
    if ff.p_round() > 0.0 {
        1.0 - ff.p_round_clean() / ff.p_round()
    } else {
        0.0
    }
}

/// Dark rate whose false heralds cost `row` of fidelity. A false herald leaves
/// a maximally mixed pair, which has Bell-state infidelity 3/4.
pub fn dark_rate_for_row(link: &LinkModel, row: f64) -> Option<f64> {
    let f = |log_rate: f64| {
        let mut l = link.clone();
        l.dark_rate_hz = log_rate.exp();
        0.75 * dark_fraction(&l) - row
    };
    bisect(f, (1e-3f64).ln(), (1e7f64).ln(), 1e-10).map(f64::exp)
}

/// Scattered-photon counts of both ions at the heralding excitation, split
/// into the part from state preparation and the rest.
#[derive(Debug, Clone, Default)]
pub struct ScatterSample {
    pub preps: Vec<[f64; 2]>,
    pub other: Vec<[f64; 2]>,
}

impl ScatterSample {
    /// Mean heating row (1 − V_A·V_B)/2 over the heralds.
    pub fn heating_row(&self, lamb_dicke: f64, recoil: f64, prep_scatters: f64) -> f64 {
        let n = self.preps.len().max(1) as f64;
        self.preps
            .iter()
            .zip(&self.other)
            .map(|(p, o)| {
                let v = |i: usize| heating_visibility(lamb_dicke, recoil * (prep_scatters * p[i] + o[i]));
                (1.0 - v(0) * v(1)) / 2.0
            })
            .sum::<f64>()
            / n
    }
}

/// Runs a fast-forward campaign of `events` heralds twice, with unit recoil and
/// zero or one photon per preparation, and separates the two contributions.
pub fn sample_scatters(link: &LinkModel, events: u64, seed: u64) -> ScatterSample {
    let run = |prep: f64| {
        let mut l = link.clone();
        l.engine = EngineMode::FastForward;
        l.emission.recoil_per_scatter = 1.0;
        l.emission.nbar_floor = 0.0;
        l.emission.prep_scatters = prep;
        let mut st = Loopback::new(StationConfig { window_ns: l.timing.window_ns, accept_psi_minus: l.accept_psi_minus, reorder_budget_ns: l.reorder_budget_ns, digest: [0; 32] })
            .expect("loopback");
        let r = run_campaign(&l, CampaignOptions { target_events: events, max_blocks: u64::MAX, keep_events: false }, &mut st, &mut SimRng::seed_from_u64(seed));
        r.successes.iter().map(|s| s.nbar).collect::<Vec<_>>()
    };
    let base = run(0.0);
    let with = run(1.0);
    let preps = with.iter().zip(&base).map(|(w, b)| [w[0] - b[0], w[1] - b[1]]).collect();
    ScatterSample { preps, other: base }
}

/// Recoil per scattered photon at which the sample's heating row equals `row`.
pub fn recoil_for_row(sample: &ScatterSample, lamb_dicke: f64, prep_scatters: f64, row: f64) -> Option<f64> {
    bisect(|r| sample.heating_row(lamb_dicke, r, prep_scatters) - row, 0.0, 10.0, 1e-12)
}

/// One recoil and one preparation scatter count that reproduce the heating
/// rows of two scenarios at once.
pub fn joint_heating(short: (&ScatterSample, f64), long: (&ScatterSample, f64), lamb_dicke: f64) -> Option<(f64, f64)> {
    let mismatch = |ps: f64| {
        let r = recoil_for_row(long.0, lamb_dicke, ps, long.1).unwrap_or(f64::NAN);
        short.0.heating_row(lamb_dicke, r, ps) - short.1
    };
    let ps = bisect(mismatch, 0.0, 100.0, 1e-9)?;
    Some((recoil_for_row(long.0, lamb_dicke, ps, long.1)?, ps))
}

/// Collection efficiency and dark rate of a preset, alternating the two
/// solves since each shifts the other slightly.
pub fn calibrate_link(config: &ExperimentConfig) -> Option<(f64, f64)> {
    let scenario = config.scenario.scenario()?;
    let mut link = config.link_model().ok()?;
    for _ in 0..4 {
        link.emission.collection_efficiency = efficiency_for_rate(&link, target_rate_hz(scenario))?;
        link.dark_rate_hz = dark_rate_for_row(&link, config.budget.dark_count)?;
    }
    Some((link.emission.collection_efficiency, link.dark_rate_hz))
}

/// Full calibration of both scenario presets.
pub fn calibrate_presets(events: u64, seed: u64) -> Option<(Calibration, Calibration, f64)> {
    use crate::config::{Preset, LAMB_DICKE};
    let short = ExperimentConfig::preset(Preset::Short);
    let long = ExperimentConfig::preset(Preset::Long);
    let (eta_s, dark_s) = calibrate_link(&short)?;
    let (eta_l, dark_l) = calibrate_link(&long)?;
    let with = |c: &ExperimentConfig, eta: f64, dark: f64| {
        let mut l = c.link_model().expect("preset link");
        l.emission.collection_efficiency = eta;
        l.dark_rate_hz = dark;
        l
    };
    let ss = sample_scatters(&with(&short, eta_s, dark_s), events, seed);
    let sl = sample_scatters(&with(&long, eta_l, dark_l), events, seed);
    let rows = |c: &ExperimentConfig| crate::analysis::heating_infidelity(c.budget.lamb_dicke, c.budget.nbar);
    let (recoil, prep) = joint_heating((&ss, rows(&short)), (&sl, rows(&long)), LAMB_DICKE)?;
    Some((
        Calibration { collection_efficiency: eta_s, dark_rate_hz: dark_s, recoil_per_scatter: recoil },
        Calibration { collection_efficiency: eta_l, dark_rate_hz: dark_l, recoil_per_scatter: recoil },
        prep,
    ))
}
