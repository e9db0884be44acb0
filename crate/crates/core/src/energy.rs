//! Spike accounting and a per-neuron energy model.
//!
//! The spike side of a stage costs `rate × T` accumulate (AC) operations
//! per neuron, doubled when each backward unit is a coupled pair. The dense
//! baseline costs `T_dense` multiply-accumulate (MAC) operations per neuron.
//! The ratio of the two is the reduction factor.

use std::fmt::Write as _;

pub const AC_ENERGY_PJ: f64 = 0.9;
pub const MAC_ENERGY_PJ: f64 = 4.6;

/// Reference inputs: forward rate 0.07 at `T_F = 30`, backward rate 0.03 at
/// `T_B = 50`, dense baseline 30 steps.
pub const REFERENCE_FWD_RATE: f64 = 0.07;
pub const REFERENCE_BWD_RATE: f64 = 0.03;
pub const REFERENCE_T_F: usize = 30;
pub const REFERENCE_T_B: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyModel {
    pub ac_energy_pj: f64,
    pub mac_energy_pj: f64,
    /// Synaptic operations per backward spike: 1, or 2 for coupled pairs.
    pub pair_factor: f64,
    /// Steps of the dense baseline.
    pub dense_steps: usize,
}

impl EnergyModel {
    pub fn new(pair_factor: f64, dense_steps: usize) -> Self {
        Self {
            ac_energy_pj: AC_ENERGY_PJ,
            mac_energy_pj: MAC_ENERGY_PJ,
            pair_factor,
            dense_steps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageEnergy {
    pub mean_rate: f64,
    pub steps: usize,
    /// Operations per neuron on the spiking side.
    pub spike_ops: f64,
    /// Operations per neuron on the dense side.
    pub dense_ops: f64,
    pub spike_cost_pj: f64,
    pub dense_cost_pj: f64,
    /// `dense_cost / spike_cost`; `None` for a silent stage.
    pub reduction_factor: Option<f64>,
}

fn stage(rate: f64, steps: usize, ops_factor: f64, model: &EnergyModel) -> StageEnergy {
    let spike_ops = rate * steps as f64 * ops_factor;
    let dense_ops = model.dense_steps as f64;
    let spike_cost_pj = spike_ops * model.ac_energy_pj;
    let dense_cost_pj = dense_ops * model.mac_energy_pj;
    StageEnergy {
        mean_rate: rate,
        steps,
        spike_ops,
        dense_ops,
        spike_cost_pj,
        dense_cost_pj,
        reduction_factor: (spike_cost_pj > 0.0).then(|| dense_cost_pj / spike_cost_pj),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyReport {
    pub forward: StageEnergy,
    pub backward: StageEnergy,
    pub ac_energy_pj: f64,
    pub mac_energy_pj: f64,
    pub pair_factor: f64,
}

/// Energy estimate from mean rates; the pair factor applies to the
/// backward spike side only.
pub fn energy_report(fwd_rate: f64, bwd_rate: f64, t_f: usize, t_b: usize, model: &EnergyModel) -> EnergyReport {
    EnergyReport {
        forward: stage(fwd_rate, t_f, 1.0, model),
        backward: stage(bwd_rate, t_b, model.pair_factor, model),
        ac_energy_pj: model.ac_energy_pj,
        mac_energy_pj: model.mac_energy_pj,
        pair_factor: model.pair_factor,
    }
}

/// Fanout-weighted variant: every spike costs one AC per outgoing synapse
/// and the dense baseline one MAC per synapse per step. `fanout[l]` is the
/// number of outgoing synapses of one neuron in layer `l`.
pub fn energy_report_fanout(
    fwd_rates: &[f64],
    bwd_rates: &[f64],
    widths: &[usize],
    fwd_fanout: &[usize],
    bwd_fanout: &[usize],
    t_f: usize,
    t_b: usize,
    model: &EnergyModel,
) -> EnergyReport {
    let totals = |rates: &[f64], fanout: &[usize], steps: usize, factor: f64| -> StageEnergy {
        let synapses: f64 = widths.iter().zip(fanout).map(|(&n, &f)| (n * f) as f64).sum();
        let spike_ops: f64 = rates
            .iter()
            .zip(widths)
            .zip(fanout)
            .map(|((&r, &n), &f)| r * n as f64 * f as f64 * steps as f64 * factor)
            .sum();
        let dense_ops = synapses * model.dense_steps as f64;
        let neurons: usize = widths.iter().sum();
        let spike_cost_pj = spike_ops * model.ac_energy_pj;
        let dense_cost_pj = dense_ops * model.mac_energy_pj;
        StageEnergy {
            mean_rate: weighted_mean(rates, widths),
            steps,
            spike_ops: spike_ops / neurons.max(1) as f64,
            dense_ops: dense_ops / neurons.max(1) as f64,
            spike_cost_pj,
            dense_cost_pj,
            reduction_factor: (spike_cost_pj > 0.0).then(|| dense_cost_pj / spike_cost_pj),
        }
    };
    EnergyReport {
        forward: totals(fwd_rates, fwd_fanout, t_f, 1.0),
        backward: totals(bwd_rates, bwd_fanout, t_b, model.pair_factor),
        ac_energy_pj: model.ac_energy_pj,
        mac_energy_pj: model.mac_energy_pj,
        pair_factor: model.pair_factor,
    }
}

fn weighted_mean(rates: &[f64], widths: &[usize]) -> f64 {
    let n: usize = widths.iter().sum();
    if n == 0 {
        return 0.0;
    }
    rates.iter().zip(widths).map(|(r, &w)| r * w as f64).sum::<f64>() / n as f64
}

/// `"102×"`, or `"n/a"` for a silent stage.
pub fn format_reduction(r: Option<f64>) -> String {
    match r {
        Some(v) if v.is_finite() => format!("{v:.0}×"),
        _ => "n/a".into(),
    }
}

impl EnergyReport {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (name, st) in [("forward", &self.forward), ("backward", &self.backward)] {
            let _ = writeln!(s, "{name}.mean_rate = {}", st.mean_rate);
            let _ = writeln!(s, "{name}.steps = {}", st.steps);
            let _ = writeln!(s, "{name}.spike_ops = {}", st.spike_ops);
            let _ = writeln!(s, "{name}.dense_ops = {}", st.dense_ops);
            let _ = writeln!(s, "{name}.spike_cost_pj = {}", st.spike_cost_pj);
            let _ = writeln!(s, "{name}.dense_cost_pj = {}", st.dense_cost_pj);
            let _ = writeln!(s, "{name}.reduction = {}", format_reduction(st.reduction_factor));
        }
        let _ = writeln!(s, "ac_energy_pj = {}", self.ac_energy_pj);
        let _ = writeln!(s, "mac_energy_pj = {}", self.mac_energy_pj);
        let _ = writeln!(s, "pair_factor = {}", self.pair_factor);
        s
    }

    pub const CSV_HEADER: &'static str =
        "fwd_mean_rate,bwd_mean_rate,t_f,t_b,pair_factor,fwd_spike_cost_pj,fwd_dense_cost_pj,fwd_reduction,bwd_spike_cost_pj,bwd_dense_cost_pj,bwd_reduction";

    pub fn csv_row(&self) -> String {
        let r = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.forward.mean_rate,
            self.backward.mean_rate,
            self.forward.steps,
            self.backward.steps,
            self.pair_factor,
            self.forward.spike_cost_pj,
            self.forward.dense_cost_pj,
            r(self.forward.reduction_factor),
            self.backward.spike_cost_pj,
            self.backward.dense_cost_pj,
            r(self.backward.reduction_factor),
        )
    }
}

/// Mean |spike| rates per layer and overall.
#[derive(Clone, Debug, PartialEq)]
pub struct RateStats {
    pub per_layer: Vec<f64>,
    pub global: f64,
}

/// Rates from per-layer spike counts accumulated over `samples` runs of
/// `steps` steps each. Both polarities count as firing.
pub fn rate_stats(spike_counts: &[u64], widths: &[usize], steps: usize, samples: usize) -> RateStats {
    let denom = |n: usize| (n * steps * samples) as f64;
    let per_layer = spike_counts
        .iter()
        .zip(widths)
        .map(|(&c, &n)| if n * steps * samples == 0 { 0.0 } else { c as f64 / denom(n) })
        .collect();
    let total: u64 = spike_counts.iter().sum();
    let neurons: usize = widths.iter().sum();
    RateStats {
        per_layer,
        global: if neurons * steps * samples == 0 {
            0.0
        } else {
            total as f64 / denom(neurons)
        },
    }
}

/// Rate of a recorded trace: nonzero entries over `neurons × steps`.
pub fn trace_rate(trace: &[Vec<i8>]) -> f64 {
    let cells: usize = trace.iter().map(|s| s.len()).sum();
    if cells == 0 {
        return 0.0;
    }
    trace.iter().flatten().filter(|&&s| s != 0).count() as f64 / cells as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference(pair: f64) -> EnergyReport {
        energy_report(REFERENCE_FWD_RATE, REFERENCE_BWD_RATE, REFERENCE_T_F, REFERENCE_T_B, &EnergyModel::new(pair, REFERENCE_T_F))
    }

    #[test]
    fn reference_reductions() {
        let r = reference(1.0);
        assert_eq!(format_reduction(r.backward.reduction_factor), "102×");
        assert_eq!(format_reduction(r.forward.reduction_factor), "73×");
        let r2 = reference(2.0);
        assert_eq!(format_reduction(r2.backward.reduction_factor), "51×");
        assert_eq!(format_reduction(r2.forward.reduction_factor), "73×");
        let b = r.backward;
        assert!((b.reduction_factor.unwrap() - b.dense_cost_pj / b.spike_cost_pj).abs() < 1e-12);
    }

    #[test]
    fn silent_is_na() {
        let r = energy_report(0.0, 0.0, 30, 50, &EnergyModel::new(1.0, 30));
        assert_eq!(format_reduction(r.forward.reduction_factor), "n/a");
        assert!(r.csv_row().contains("n/a"));
    }

    #[test]
    fn rate_examples() {
        assert_eq!(rate_stats(&[0, 0], &[3, 4], 10, 1).global, 0.0);
        assert_eq!(rate_stats(&[30], &[3], 10, 1).global, 1.0);
        let trace = vec![vec![1, 0], vec![0, -1], vec![0, 0], vec![1, 0], vec![0, 0], vec![0, 0], vec![0, 0], vec![0, 0], vec![0, 0], vec![0, 0]];
        assert_eq!(trace_rate(&trace), 0.15);
    }

    #[test]
    fn fanout_variant_reduces_to_per_neuron_with_unit_fanout() {
        let m = EnergyModel::new(1.0, 30);
        let a = energy_report_fanout(&[0.07], &[0.03], &[10], &[1], &[1], 30, 50, &m);
        let b = energy_report(0.07, 0.03, 30, 50, &m);
        assert!((a.backward.reduction_factor.unwrap() - b.backward.reduction_factor.unwrap()).abs() < 1e-9);
    }
}
