//! Station-side pattern matcher: assigns clicks to attempt windows and turns
//! each closed window into a herald.

use std::collections::BTreeMap;

use crate::optics::{classify, ClickEvent, HeraldPattern, HeraldVerdict};

use super::{HeraldMessage, ProtocolFault, SlotId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotWindow {
    pub slot: SlotId,
    pub open_ns: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub message: HeraldMessage,
    pub verdict: HeraldVerdict,
    /// First accepted herald of its block.
    pub acted: bool,
}

#[derive(Debug, Clone)]
pub struct QNetWorker {
    window_ns: u64,
    accept_psi_minus: bool,
    reorder_budget_ns: u64,
    last_ts: [Option<u64>; 4],
    buffer: Vec<ClickEvent>,
    succeeded: BTreeMap<u32, SlotId>,
}

impl QNetWorker {
    pub fn new(window_ns: u64, accept_psi_minus: bool, reorder_budget_ns: u64) -> Self {
        Self { window_ns, accept_psi_minus, reorder_budget_ns, last_ts: [None; 4], buffer: Vec::new(), succeeded: BTreeMap::new() }
    }

    pub fn submit(&mut self, click: ClickEvent) -> Result<(), ProtocolFault> {
        let slot = &mut self.last_ts[click.detector.index()];
        if let Some(prev) = *slot {
            if click.timestamp_ns + self.reorder_budget_ns < prev {
                return Err(ProtocolFault::OutOfOrder { detector: click.detector, ts: click.timestamp_ns, behind: prev - click.timestamp_ns });
            }
        }
        *slot = Some(slot.map_or(click.timestamp_ns, |p| p.max(click.timestamp_ns)));
        self.buffer.push(click);
        Ok(())
    }

    /// Classifies the window and drops every buffered click that precedes its end.
    pub fn close(&mut self, w: SlotWindow) -> Decision {
        let end = w.open_ns + self.window_ns;
        let verdict = classify(&self.buffer, w.open_ns, self.window_ns);
        self.buffer.retain(|c| c.timestamp_ns >= end);
        let accepted = verdict.pattern.accepted(self.accept_psi_minus);
        let acted = accepted && !self.succeeded.contains_key(&w.slot.block);
        if acted {
            self.succeeded.insert(w.slot.block, w.slot);
        }
        let message = HeraldMessage {
            block_id: w.slot.block,
            round: w.slot.round,
            mode_index: w.slot.mode,
            pattern: verdict.pattern.code(),
            station_timestamp_ns: end,
        };
        Decision { message, verdict, acted }
    }

    /// Forgets a completed block. Buffered clicks may already belong to the next one.
    pub fn finish_block(&mut self, block: u32) {
        self.succeeded.remove(&block);
    }

    /// Forgets an aborted block along with every buffered click.
    pub fn end_block(&mut self, block: u32) {
        self.succeeded.remove(&block);
        self.buffer.clear();
        self.last_ts = [None; 4];
    }

    pub fn first_success(&self, block: u32) -> Option<SlotId> {
        self.succeeded.get(&block).copied()
    }
}

/// Batch matcher over a click stream and a window schedule: one message per window.
pub fn qnetworker_match(
    clicks: &[ClickEvent],
    windows: &[SlotWindow],
    window_ns: u64,
    accept_psi_minus: bool,
    reorder_budget_ns: u64,
) -> Result<Vec<Decision>, ProtocolFault> {
    let mut q = QNetWorker::new(window_ns, accept_psi_minus, reorder_budget_ns);
    let mut sorted_windows = windows.to_vec();
    sorted_windows.sort_by_key(|w| (w.open_ns, w.slot));
    let mut out = Vec::with_capacity(windows.len());
    let mut next = 0;
    for w in sorted_windows {
        let end = w.open_ns + window_ns;
        while next < clicks.len() && clicks[next].timestamp_ns < end {
            q.submit(clicks[next])?;
            next += 1;
        }
        out.push(q.close(w));
    }
    Ok(out)
}

pub fn is_success(pattern: HeraldPattern, accept_psi_minus: bool) -> bool {
    pattern.accepted(accept_psi_minus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{Detector, Origin};

    fn click(d: Detector, t: u64) -> ClickEvent {
        ClickEvent { detector: d, timestamp_ns: t, origin: Origin::Signal }
    }

    fn windows(n: u8, spacing: u64) -> Vec<SlotWindow> {
        (1..=n).map(|m| SlotWindow { slot: SlotId { block: 0, round: 1, mode: m }, open_ns: 1000 + (m as u64 - 1) * spacing }).collect()
    }

    #[test]
    fn pair_in_mode_three_heralds_psi_plus() {
        let w = windows(10, 500);
        let clicks = [click(Detector::AH, 2005), click(Detector::AV, 2015)];
        let d = qnetworker_match(&clicks, &w, 45, false, 0).unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(d[2].message.mode_index, 3);
        assert_eq!(d[2].message.herald_pattern(), HeraldPattern::PsiPlus);
        assert!(d[2].acted);
        assert!(d.iter().enumerate().all(|(i, x)| i == 2 || x.message.pattern == 0));
    }

    #[test]
    fn single_click_is_none() {
        let d = qnetworker_match(&[click(Detector::BV, 1010)], &windows(1, 500), 45, false, 0).unwrap();
        assert_eq!(d[0].message.herald_pattern(), HeraldPattern::None);
    }

    #[test]
    fn no_matching_across_slots() {
        let clicks = [click(Detector::AH, 1020), click(Detector::AV, 1480)];
        let d = qnetworker_match(&clicks, &windows(2, 500), 45, false, 0).unwrap();
        assert!(d.iter().all(|x| x.message.herald_pattern() == HeraldPattern::None));
    }

    #[test]
    fn first_success_wins() {
        let clicks = [click(Detector::AH, 1001), click(Detector::AV, 1002), click(Detector::BH, 1501), click(Detector::BV, 1502)];
        let d = qnetworker_match(&clicks, &windows(2, 500), 45, false, 0).unwrap();
        assert!(d[0].acted && !d[1].acted);
        assert_eq!(d[1].message.herald_pattern(), HeraldPattern::PsiPlus);
    }

    #[test]
    fn reorder_beyond_budget_faults() {
        let mut q = QNetWorker::new(45, false, 5);
        q.submit(click(Detector::AH, 100)).unwrap();
        q.submit(click(Detector::AH, 96)).unwrap();
        assert!(matches!(q.submit(click(Detector::AH, 90)), Err(ProtocolFault::OutOfOrder { behind: 10, .. })));
        q.submit(click(Detector::AV, 10)).unwrap();
    }

    #[test]
    fn psi_minus_only_when_enabled() {
        let clicks = [click(Detector::AH, 1001), click(Detector::BV, 1002)];
        let off = qnetworker_match(&clicks, &windows(1, 500), 45, false, 0).unwrap();
        let on = qnetworker_match(&clicks, &windows(1, 500), 45, true, 0).unwrap();
        assert!(!off[0].acted && on[0].acted);
        assert_eq!(off[0].message.herald_pattern(), HeraldPattern::PsiMinus);
    }
}
