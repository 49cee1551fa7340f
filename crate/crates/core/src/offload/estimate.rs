use crate::model::{ComputeCapability, ComputeWorkload};

use super::OffloadError;

/// Effective execution rate once the node's current load is discounted.
pub fn effective_rate(cap: &ComputeCapability) -> Result<f64, OffloadError> {
    if cap.current_load >= 1.0 {
        return Err(OffloadError::InfeasibleLoad(cap.node_id.clone()));
    }
    Ok(cap.flops_per_second * (1.0 - cap.current_load))
}

pub fn compute_time(flops: f64, cap: &ComputeCapability) -> Result<f64, OffloadError> {
    Ok(flops / effective_rate(cap)?)
}

/// Time from the first offloaded bit to the last received result bit:
/// upload, execution at the load-discounted rate, download.
pub fn estimate_latency(w: &ComputeWorkload, cap: &ComputeCapability) -> Result<f64, OffloadError> {
    let upload = w.payload_bits / cap.link_bw_up;
    let execute = compute_time(w.flops, cap)?;
    let download = w.result_bits / cap.link_bw_down;
    Ok(upload + execute + download)
}

/// Compute energy plus the energy to move payload and result.
pub fn estimate_energy(w: &ComputeWorkload, cap: &ComputeCapability) -> f64 {
    w.flops * cap.energy_per_flop + (w.payload_bits + w.result_bits) * cap.energy_per_bit
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::{Precision, QosClass, TrafficClass};

    pub(crate) fn workload() -> ComputeWorkload {
        ComputeWorkload {
            workload_id: "w".into(),
            traffic_class: TrafficClass::OneTimeOneNode,
            flops: 2e9,
            memory: 1e6,
            payload_bits: 8e6,
            result_bits: 8e5,
            precision: Precision::Fp32,
            qos: QosClass::PrecisionSensitive,
            iterations: 1,
        }
    }

    pub(crate) fn capability(load: f64) -> ComputeCapability {
        ComputeCapability {
            node_id: "cn".into(),
            flops_per_second: 1e10,
            memory_bytes: 1e9,
            supported_precisions: [Precision::Fp32].into(),
            link_bw_up: 1e8,
            link_bw_down: 1e8,
            energy_per_flop: 1e-9,
            energy_per_bit: 1e-8,
            current_load: load,
        }
    }

    #[test]
    fn latency_is_sum_of_three_terms() {
        let l = estimate_latency(&workload(), &capability(0.0)).unwrap();
        assert!((l - 0.288).abs() < 1e-12);
        let l = estimate_latency(&workload(), &capability(0.5)).unwrap();
        assert!((l - 0.488).abs() < 1e-12);
    }

    #[test]
    fn full_load_is_infeasible() {
        assert_eq!(estimate_latency(&workload(), &capability(1.0)), Err(OffloadError::InfeasibleLoad("cn".into())));
    }

    #[test]
    fn energy_is_compute_plus_transfer() {
        let e = estimate_energy(&workload(), &capability(0.0));
        assert!((e - 2.088).abs() < 1e-12);

        let mut cap = capability(0.0);
        cap.energy_per_bit = 0.0;
        assert_eq!(estimate_energy(&workload(), &cap), 2.0);

        let w = ComputeWorkload { flops: 0.0, ..workload() };
        assert!((estimate_energy(&w, &capability(0.0)) - 0.088).abs() < 1e-12);
    }
}
